// featguide command line: invert, edit, reconstruct, eval, serve.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "featguide/eval.hpp"
#include "featguide/image_io.hpp"
#include "featguide/sampler.hpp"
#include "featguide/service.hpp"

using namespace featguide;
using nlohmann::json;

namespace {

struct Common {
  std::string profile = "toy";
  int steps = 50;
  double cfg_scale = 5.0;
  int n_gated = 30;
  std::optional<std::uint64_t> seed;
  std::optional<double> eta;
};

std::unique_ptr<Backend> backend_for(const Common& c) {
  BackendProfile p = resolve_profile(c.profile);
  if (c.seed) p.seed = *c.seed;
  return make_backend(p);
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open " + path);
  return json::parse(in);
}

MemoryBank load_checked_bank(const Backend& backend, const std::string& dir) {
  MemoryBank bank = load_bank(dir);
  if (bank.profile_hash != backend.profile().hash()) {
    throw ContractError("bank " + dir + " was built with a different backend profile");
  }
  return bank;
}

GuidanceConfig cli_config(const Common& c, const MemoryBank& bank, const std::string& config_path) {
  GuidanceConfig cfg;
  cfg.steps = bank.steps;
  cfg.cfg_scale = c.cfg_scale;
  cfg.n_gated = std::min(c.n_gated, bank.steps);
  if (!config_path.empty()) cfg = config_from_json(read_json_file(config_path), cfg);
  if (c.eta) cfg.eta = c.eta;
  validate(cfg);
  return cfg;
}

void print_timing(const MemoryBank& bank, const RunResult& r) {
  json t{{"preparing_seconds", bank.preparing_seconds},
         {"inference_seconds", r.inference_seconds},
         {"gradient_evaluations", r.gradient_evaluations}};
  if (r.eta) t["eta"] = *r.eta;
  std::printf("%s\n", t.dump().c_str());
}

int cmd_invert(const Common& c, const std::string& image, const std::string& ref, const std::string& out,
               const std::string& prompt) {
  auto backend = backend_for(c);
  const Latent z0 = backend->encode(read_png(image));
  std::optional<Latent> z_ref;
  if (!ref.empty()) z_ref = backend->encode(read_png(ref));
  const MemoryBank bank = invert(*backend, z0, z_ref, c.steps, TextCondition{prompt});
  save_bank(bank, out);
  std::printf("%s\n", json{{"bank", out},
                           {"steps", bank.steps},
                           {"has_reference", bank.has_reference},
                           {"preparing_seconds", bank.preparing_seconds}}
                          .dump()
                          .c_str());
  return 0;
}

int cmd_edit(const Common& c, const std::string& bank_dir, const std::string& spec_path, const std::string& out,
             const std::string& config_path, const std::string& log_path) {
  auto backend = backend_for(c);
  const MemoryBank bank = load_checked_bank(*backend, bank_dir);
  const json sj = read_json_file(spec_path);
  const BackendProfile& p = backend->profile();
  const EditSpec spec = sj.contains("m_gen") ? spec_from_json(sj) : spec_from_request(sj, p.image_height(), p.image_width());
  if (spec.uses_reference_image && !bank.has_reference) {
    throw ContractError(std::string(to_string(spec.kind)) + " needs a bank inverted with --ref");
  }
  const GuidanceConfig cfg = resolve_config(cli_config(c, bank, config_path), spec);
  const TextCondition text{bank.prompt};
  FeatureGuidance guidance(*backend, spec, cfg, text);
  RunOptions options;
  options.guidance = &guidance;
  const RunResult r = run(*backend, bank, spec.kind, cfg, text, options);
  write_png(out, backend->decode(r.z0));
  if (!log_path.empty()) write_bytes(log_path, step_log_ndjson(r.log));
  print_timing(bank, r);
  return 0;
}

int cmd_reconstruct(const Common& c, const std::string& bank_dir, const std::string& out) {
  auto backend = backend_for(c);
  const MemoryBank bank = load_checked_bank(*backend, bank_dir);
  GuidanceConfig cfg;
  cfg.steps = bank.steps;
  cfg.cfg_scale = c.cfg_scale;
  cfg.n_gated = 0;
  const RunResult r = run(*backend, bank, EditKind::moving, cfg, TextCondition{bank.prompt});
  write_png(out, backend->decode(r.z0));
  print_timing(bank, r);
  return 0;
}

int cmd_eval(const std::string& results, const std::string& targets, const std::string& report_path) {
  const EvalReport report = evaluate_directory(results, targets);
  std::fputs(report_table(report).c_str(), stdout);
  if (!report_path.empty()) write_bytes(report_path, report_to_json(report).dump(2));
  return 0;
}

std::atomic<bool> g_interrupted{false};

int cmd_serve(const Common& c, const std::string& config_path) {
  ServiceConfig sc = load_service_config(config_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_path));
  if (c.profile != "toy") sc.backend_profile = c.profile;
  BackendProfile p = resolve_profile(sc.backend_profile);
  if (c.seed) p.seed = *c.seed;
  JobService service(sc, make_backend(p));
  HttpServer server(service);
  const int port = server.start(sc.host, sc.port);
  std::printf("listening on http://%s:%d (storage %s)\n", sc.host.c_str(), port, sc.storage_dir.c_str());
  std::fflush(stdout);
  std::signal(SIGINT, [](int) { g_interrupted = true; });
  std::signal(SIGTERM, [](int) { g_interrupted = true; });
  while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(200));
  server.stop();
  service.shutdown();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-guided diffusion image editing"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--backend-profile", common.profile, "toy, sd15, or a profile JSON path")->capture_default_str();
  app.add_option("--steps", common.steps, "DDIM steps T")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--cfg-scale", common.cfg_scale, "classifier-free guidance scale")->capture_default_str();
  app.add_option("--n-gated", common.n_gated, "number of guided steps")->capture_default_str();
  app.add_option("--seed", common.seed, "backend weight seed");
  app.add_option("--eta", common.eta, "guidance learning rate (default: calibrated)");

  std::string image, ref, out, prompt, bank, spec, config, log, results, targets, report;
  auto* inv = app.add_subcommand("invert", "DDIM-invert an image into a memory bank");
  inv->add_option("image", image)->required()->check(CLI::ExistingFile);
  inv->add_option("out_bank", out)->required();
  inv->add_option("--ref", ref, "reference image for replacing/pasting")->check(CLI::ExistingFile);
  inv->add_option("--prompt", prompt, "short description of the image");

  auto* edit = app.add_subcommand("edit", "run a guided edit from a bank");
  edit->add_option("bank", bank)->required()->check(CLI::ExistingDirectory);
  edit->add_option("spec", spec)->required()->check(CLI::ExistingFile);
  edit->add_option("out", out)->required();
  edit->add_option("--config", config, "guidance config JSON")->check(CLI::ExistingFile);
  edit->add_option("--log", log, "write the step log as NDJSON");

  auto* recon = app.add_subcommand("reconstruct", "sample a bank without guidance");
  recon->add_option("bank", bank)->required()->check(CLI::ExistingDirectory);
  recon->add_option("out", out)->required();

  auto* ev = app.add_subcommand("eval", "mean point distance against targets");
  ev->add_option("results_dir", results)->required()->check(CLI::ExistingDirectory);
  ev->add_option("targets", targets)->required()->check(CLI::ExistingFile);
  ev->add_option("--report", report, "write the JSON report here");

  auto* serve = app.add_subcommand("serve", "run the HTTP job service");
  serve->add_option("--config", config, "service config JSON");

  CLI11_PARSE(app, argc, argv);
  // reconstruction defaults to the pure conditional branch
  if (recon->parsed() && app.get_option("--cfg-scale")->count() == 0) common.cfg_scale = 1.0;
  try {
    if (inv->parsed()) return cmd_invert(common, image, ref, out, prompt);
    if (edit->parsed()) return cmd_edit(common, bank, spec, out, config, log);
    if (recon->parsed()) return cmd_reconstruct(common, bank, out);
    if (ev->parsed()) return cmd_eval(results, targets, report);
    if (serve->parsed()) return cmd_serve(common, config);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
