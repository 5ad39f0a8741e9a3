#include "featguide/service.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "featguide/encoding.hpp"
#include "featguide/image_io.hpp"

namespace featguide {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- configuration ----

ServiceConfig load_service_config(const std::optional<fs::path>& path) {
  ServiceConfig c;
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ContractError("cannot open service config " + path->string());
    const json j = json::parse(in);
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.storage_dir = j.value("storage_dir", c.storage_dir.string());
    c.backend_profile = j.value("backend_profile", c.backend_profile);
    c.workers = j.value("workers", c.workers);
  }
  if (const char* v = std::getenv("FEATGUIDE_HOST")) c.host = v;
  if (const char* v = std::getenv("FEATGUIDE_PORT")) c.port = std::stoi(v);
  if (const char* v = std::getenv("FEATGUIDE_STORAGE")) c.storage_dir = v;
  if (const char* v = std::getenv("FEATGUIDE_PROFILE")) c.backend_profile = v;
  if (const char* v = std::getenv("FEATGUIDE_WORKERS")) c.workers = static_cast<std::size_t>(std::stoul(v));
  if (c.workers == 0) throw ContractError("workers must be >= 1");
  return c;
}

BackendProfile resolve_profile(const std::string& name_or_path) {
  if (name_or_path == "toy") return toy_profile();
  if (name_or_path == "sd15") return pretrained_profile();
  return load_profile(name_or_path);
}

std::string_view to_string(JobPhase p) {
  switch (p) {
    case JobPhase::queued: return "queued";
    case JobPhase::inverting: return "inverting";
    case JobPhase::sampling: return "sampling";
    case JobPhase::done: return "done";
    case JobPhase::failed: return "failed";
    case JobPhase::cancelled: return "cancelled";
  }
  return "queued";
}

JobPhase job_phase_from(std::string_view name) {
  for (JobPhase p : {JobPhase::queued, JobPhase::inverting, JobPhase::sampling, JobPhase::done, JobPhase::failed,
                     JobPhase::cancelled}) {
    if (to_string(p) == name) return p;
  }
  throw ContractError("unknown job phase '" + std::string(name) + "'");
}

// ---- state ----

struct JobService::Job {
  std::string id;
  std::string bank_id;
  EditSpec spec;
  GuidanceConfig config;
  JobPhase phase = JobPhase::queued;
  int attempt = 1;
  int steps_done = 0;
  double preparing_seconds = 0.0;
  double inference_seconds = 0.0;
  std::optional<double> eta;
  std::string error;
  std::vector<std::string> previews;
  bool has_result = false;
  std::vector<JobEvent> events;
  std::atomic<bool> stop{false};
  bool cancel_requested = false;
  std::condition_variable cv;
};

struct JobService::Bank {
  MemoryBank bank;
  std::string image_id;
  std::optional<std::string> ref_image_id;
};

namespace {

std::string short_hash(std::string_view bytes) { return sha256_hex(bytes).substr(0, 24); }

bool valid_id(const std::string& id) {
  if (id.empty() || id.size() > 64) return false;
  for (char c : id) {
    if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
  }
  return true;
}

void write_atomic(const fs::path& path, std::string_view bytes) {
  const fs::path tmp = path.string() + ".tmp";
  write_bytes(tmp, bytes);
  fs::rename(tmp, path);
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  out << line << '\n';
}

std::string b64(std::string_view bytes) {
  return base64_encode({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
}

json event_json(const JobEvent& e) { return json{{"type", e.type}, {"data", e.data}}; }

}  // namespace

JobService::JobService(ServiceConfig config, std::unique_ptr<Backend> backend)
    : config_(std::move(config)), backend_(std::move(backend)) {
  if (!backend_) throw ContractError("service needs a backend");
  for (const char* sub : {"images", "banks", "jobs"}) fs::create_directories(config_.storage_dir / sub);
  recover();
  for (std::size_t i = 0; i < config_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
}

JobService::~JobService() { shutdown(); }

void JobService::shutdown() {
  {
    std::lock_guard lock(mutex_);
    if (stopping_ && workers_.empty()) return;
    stopping_ = true;
    for (auto& [id, job] : jobs_) job->stop = true;
  }
  queue_cv_.notify_all();
  for (std::thread& t : workers_) {
    if (t.joinable()) t.join();
  }
  workers_.clear();
}

fs::path JobService::image_path(const std::string& id) const { return config_.storage_dir / "images" / (id + ".png"); }
fs::path JobService::bank_dir(const std::string& id) const { return config_.storage_dir / "banks" / id; }
fs::path JobService::job_dir(const std::string& id) const { return config_.storage_dir / "jobs" / id; }

// ---- images ----

json JobService::put_image(std::string_view png) {
  Image img;
  try {
    img = decode_png_rgb(png);
  } catch (const ContractError& e) {
    throw ServiceError(422, e.what(), "image");
  }
  const BackendProfile& p = backend_->profile();
  if (img.width != p.image_width() || img.height != p.image_height()) {
    throw ServiceError(422,
                       "image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                           ", backend expects " + std::to_string(p.image_width()) + "x" +
                           std::to_string(p.image_height()),
                       "image");
  }
  // store the canonical RGB encoding so the id is independent of PNG options
  const std::string canonical = encode_png(img);
  const std::string id = short_hash(canonical);
  if (!fs::exists(image_path(id))) write_atomic(image_path(id), canonical);
  return json{{"v", 1}, {"image_id", id}, {"width", img.width}, {"height", img.height}};
}

std::string JobService::image_png(const std::string& id) const {
  if (!valid_id(id) || !fs::exists(image_path(id))) throw ServiceError(404, "unknown image " + id);
  return read_bytes(image_path(id));
}

// ---- banks ----

json JobService::create_bank(const json& r) {
  if (!r.is_object() || r.value("v", 0) != 1) throw ServiceError(422, "expected {\"v\":1,...}", "v");
  if (!r.contains("image_id") || !r["image_id"].is_string()) throw ServiceError(422, "missing", "image_id");
  const std::string image_id = r["image_id"].get<std::string>();
  std::optional<std::string> ref_id;
  if (r.contains("ref_image_id") && !r["ref_image_id"].is_null()) {
    if (!r["ref_image_id"].is_string()) throw ServiceError(422, "expected a string", "ref_image_id");
    ref_id = r["ref_image_id"].get<std::string>();
  }
  const std::string prompt = r.value("prompt", std::string());
  const int steps = r.value("steps", backend_->profile().steps);
  if (steps < 1) throw ServiceError(422, "must be >= 1", "steps");
  const std::string png = image_png(image_id);
  std::optional<std::string> ref_png;
  if (ref_id) ref_png = image_png(*ref_id);

  json key{{"profile", backend_->profile().hash()}, {"image_id", image_id}, {"prompt", prompt}, {"steps", steps}};
  if (ref_id) key["ref_image_id"] = *ref_id;
  const std::string id = short_hash(key.dump());
  const fs::path dir = bank_dir(id);

  std::lock_guard build(bank_build_mutex_);
  bool created = false;
  if (!fs::exists(dir / "manifest.json")) {
    const Latent z0 = backend_->encode(decode_png_rgb(png));
    std::optional<Latent> z_ref;
    if (ref_png) z_ref = backend_->encode(decode_png_rgb(*ref_png));
    const MemoryBank bank = invert(*backend_, z0, z_ref, steps, TextCondition{prompt});
    fs::create_directories(dir);
    json meta{{"v", 1}, {"image_id", image_id}};
    if (ref_id) meta["ref_image_id"] = *ref_id;
    write_atomic(dir / "bank.json", meta.dump());
    save_bank(bank, dir);
    created = true;
  }
  json info = bank_info(id);
  info["created"] = created;
  return info;
}

std::shared_ptr<const JobService::Bank> JobService::load_bank_cached(const std::string& id) const {
  {
    std::lock_guard lock(mutex_);
    auto it = banks_.find(id);
    if (it != banks_.end()) return it->second;
  }
  if (!valid_id(id) || !fs::exists(bank_dir(id) / "manifest.json")) throw ServiceError(404, "unknown bank " + id);
  auto bank = std::make_shared<Bank>();
  bank->bank = load_bank(bank_dir(id));
  const json meta = json::parse(read_bytes(bank_dir(id) / "bank.json"));
  bank->image_id = meta.at("image_id").get<std::string>();
  if (meta.contains("ref_image_id")) bank->ref_image_id = meta["ref_image_id"].get<std::string>();
  std::lock_guard lock(mutex_);
  return banks_.emplace(id, std::move(bank)).first->second;
}

json JobService::bank_info(const std::string& id) const {
  const auto b = load_bank_cached(id);
  json j{{"v", 1},
         {"bank_id", id},
         {"image_id", b->image_id},
         {"steps", b->bank.steps},
         {"has_reference", b->bank.has_reference},
         {"prompt", b->bank.prompt},
         {"preparing_seconds", b->bank.preparing_seconds}};
  if (b->ref_image_id) j["ref_image_id"] = *b->ref_image_id;
  return j;
}

// ---- jobs ----

std::shared_ptr<JobService::Job> JobService::find_job(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw ServiceError(404, "unknown edit " + id);
  return it->second;
}

void JobService::persist(const Job& job) const {
  json j;
  j["v"] = 1;
  j["id"] = job.id;
  j["bank_id"] = job.bank_id;
  j["phase"] = std::string(to_string(job.phase));
  j["attempt"] = job.attempt;
  j["steps_done"] = job.steps_done;
  j["spec"] = spec_to_json(job.spec);
  j["config"] = config_to_json(job.config);
  j["timings"] = {{"preparing_seconds", job.preparing_seconds}, {"inference_seconds", job.inference_seconds}};
  if (job.eta) j["eta"] = *job.eta;
  json artifacts{{"step_log", "steps.ndjson"}, {"previews", job.previews}};
  if (job.has_result) artifacts["result"] = "result.png";
  j["artifacts"] = artifacts;
  if (!job.error.empty()) j["error"] = job.error;
  write_atomic(job_dir(job.id) / "job.json", j.dump(2));
}

void JobService::push_event(Job& job, JobEvent event) {
  // caller holds mutex_
  append_line(job_dir(job.id) / "events.ndjson", event_json(event).dump());
  job.events.push_back(std::move(event));
  job.cv.notify_all();
}

void JobService::set_phase(Job& job, JobPhase phase) {
  // caller holds mutex_
  if (static_cast<int>(phase) < static_cast<int>(job.phase) && !is_terminal(phase)) {
    throw std::logic_error("job phase may only move forward");
  }
  job.phase = phase;
  persist(job);
  json data{{"phase", std::string(to_string(phase))}};
  if (phase == JobPhase::failed) data["error"] = job.error;
  if (phase == JobPhase::done) {
    data["preparing_seconds"] = job.preparing_seconds;
    data["inference_seconds"] = job.inference_seconds;
  }
  push_event(job, JobEvent{is_terminal(phase) ? std::string(to_string(phase)) : "phase", data});
}

void JobService::recover() {
  for (const auto& entry : fs::directory_iterator(config_.storage_dir / "jobs")) {
    const fs::path file = entry.path() / "job.json";
    if (!fs::exists(file)) continue;
    auto job = std::make_shared<Job>();
    try {
      const json j = json::parse(read_bytes(file));
      job->id = j.at("id").get<std::string>();
      job->bank_id = j.at("bank_id").get<std::string>();
      job->spec = spec_from_json(j.at("spec"));
      job->config = config_from_json(j.at("config"));
      job->phase = job_phase_from(j.at("phase").get<std::string>());
      job->attempt = j.value("attempt", 1);
      job->steps_done = j.value("steps_done", 0);
      job->preparing_seconds = j.at("timings").value("preparing_seconds", 0.0);
      job->inference_seconds = j.at("timings").value("inference_seconds", 0.0);
      if (j.contains("eta")) job->eta = j["eta"].get<double>();
      job->error = j.value("error", std::string());
      job->previews = j.at("artifacts").value("previews", std::vector<std::string>{});
      job->has_result = j.at("artifacts").contains("result");
    } catch (const std::exception& e) {
      std::fprintf(stderr, "skipping unreadable job %s: %s\n", entry.path().c_str(), e.what());
      continue;
    }
    const fs::path events = entry.path() / "events.ndjson";
    if (is_terminal(job->phase)) {
      if (fs::exists(events)) {
        std::ifstream in(events);
        for (std::string line; std::getline(in, line);) {
          if (line.empty()) continue;
          const json e = json::parse(line);
          job->events.push_back({e.at("type").get<std::string>(), e.at("data")});
        }
      }
    } else {
      // interrupted run: start a fresh attempt
      job->phase = JobPhase::queued;
      job->steps_done = 0;
      job->previews.clear();
      job->has_result = false;
      ++job->attempt;
      fs::remove(events);
      fs::remove(entry.path() / "steps.ndjson");
      persist(*job);
      push_event(*job, JobEvent{"phase", {{"phase", "queued"}}});
      queue_.push_back(job->id);
    }
    jobs_.emplace(job->id, job);
  }
}

SubmitResult JobService::submit_edit(const json& r) {
  if (!r.is_object()) throw ServiceError(422, "expected a JSON object", "body");
  if (r.value("v", 0) != 1) throw ServiceError(422, "unsupported schema version", "v");
  if (!r.contains("bank_id") || !r["bank_id"].is_string()) throw ServiceError(422, "missing", "bank_id");
  const std::string bank_id = r["bank_id"].get<std::string>();
  const auto bank = load_bank_cached(bank_id);
  if (!r.contains("spec")) throw ServiceError(422, "missing", "spec");

  EditSpec spec;
  GuidanceConfig config;
  try {
    const json& s = r["spec"];
    const BackendProfile& p = backend_->profile();
    spec = (s.is_object() && s.contains("m_gen")) ? spec_from_json(s)
                                                   : spec_from_request(s, p.image_height(), p.image_width());
    GuidanceConfig base;
    base.steps = bank->bank.steps;
    base.n_gated = std::min(base.n_gated, base.steps);
    config = resolve_config(config_from_json(r.value("config", json::object()), base), spec);
    downsample_masks(spec, p);
  } catch (const SpecError& e) {
    const std::string field = e.field().rfind("config", 0) == 0 ? e.field() : "spec." + e.field();
    throw ServiceError(422, e.what(), field);
  } catch (const ContractError& e) {
    throw ServiceError(422, e.what(), "spec");
  }
  if (config.steps != bank->bank.steps) {
    throw ServiceError(422, "bank was inverted with " + std::to_string(bank->bank.steps) + " steps", "config.steps");
  }
  if (spec.uses_reference_image && !bank->bank.has_reference) {
    throw ServiceError(422, std::string(to_string(spec.kind)) + " needs a bank built with ref_image_id",
                       "bank_id");
  }
  const json key{{"bank_id", bank_id}, {"spec", spec_to_json(spec)}, {"config", config_to_json(config)}};
  const std::string id = short_hash(key.dump());

  std::lock_guard lock(mutex_);
  if (jobs_.count(id)) return {id, false};
  if (stopping_) throw ServiceError(503, "service is shutting down");
  auto job = std::make_shared<Job>();
  job->id = id;
  job->bank_id = bank_id;
  job->spec = std::move(spec);
  job->config = std::move(config);
  fs::create_directories(job_dir(id));
  fs::remove(job_dir(id) / "events.ndjson");
  persist(*job);
  push_event(*job, JobEvent{"phase", {{"phase", "queued"}}});
  jobs_.emplace(id, job);
  queue_.push_back(id);
  queue_cv_.notify_one();
  return {id, true};
}

json JobService::job_status(const std::string& id) const {
  const auto job = find_job(id);
  std::lock_guard lock(mutex_);
  json j = json::parse(read_bytes(job_dir(id) / "job.json"));
  j["events"] = job->events.size();
  return j;
}

std::string JobService::job_result_png(const std::string& id) const {
  const auto job = find_job(id);
  {
    std::lock_guard lock(mutex_);
    if (!job->has_result) throw ServiceError(409, "edit " + id + " has no result (phase " +
                                                      std::string(to_string(job->phase)) + ")");
  }
  return read_bytes(job_dir(id) / "result.png");
}

void JobService::cancel(const std::string& id) {
  const auto job = find_job(id);
  std::lock_guard lock(mutex_);
  if (is_terminal(job->phase)) {
    throw ServiceError(409, "edit " + id + " is already " + std::string(to_string(job->phase)));
  }
  job->cancel_requested = true;
  job->stop = true;
  if (job->phase == JobPhase::queued) {
    std::erase(queue_, id);
    set_phase(*job, JobPhase::cancelled);
  }
}

std::vector<JobEvent> JobService::events(const std::string& id, std::size_t from, std::chrono::milliseconds wait,
                                         bool& finished) const {
  const auto job = find_job(id);
  std::unique_lock lock(mutex_);
  job->cv.wait_for(lock, wait, [&] { return job->events.size() > from; });
  std::vector<JobEvent> out;
  for (std::size_t i = from; i < job->events.size(); ++i) out.push_back(job->events[i]);
  finished = is_terminal(job->phase) && from + out.size() == job->events.size();
  return out;
}

JobPhase JobService::wait_for(const std::string& id, std::chrono::milliseconds timeout) const {
  const auto job = find_job(id);
  std::unique_lock lock(mutex_);
  job->cv.wait_for(lock, timeout, [&] { return is_terminal(job->phase); });
  return job->phase;
}

void JobService::worker_loop() {
  for (;;) {
    std::shared_ptr<Job> job;
    {
      std::unique_lock lock(mutex_);
      queue_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      job = jobs_.at(queue_.front());
      queue_.pop_front();
    }
    execute(job);
  }
}

void JobService::execute(const std::shared_ptr<Job>& job) {
  try {
    {
      std::lock_guard lock(mutex_);
      set_phase(*job, JobPhase::inverting);
    }
    const auto bank = load_bank_cached(job->bank_id);
    const TextCondition text{bank->bank.prompt};
    FeatureGuidance guidance(*backend_, job->spec, job->config, text);
    {
      std::lock_guard lock(mutex_);
      job->preparing_seconds = bank->bank.preparing_seconds;
      set_phase(*job, JobPhase::sampling);
    }
    RunOptions options;
    options.guidance = &guidance;
    options.cancel = &job->stop;
    options.on_step = [&](const StepRecord& rec) {
      const json j = step_to_json(rec);
      std::lock_guard lock(mutex_);
      append_line(job_dir(job->id) / "steps.ndjson", j.dump());
      ++job->steps_done;
      push_event(*job, JobEvent{"step", j});
    };
    options.on_preview = [&](int t, const Latent& x0) {
      char name[32];
      std::snprintf(name, sizeof name, "preview_%04d.png", t);
      const std::string png = encode_png(backend_->decode(x0));
      write_atomic(job_dir(job->id) / name, png);
      std::lock_guard lock(mutex_);
      job->previews.emplace_back(name);
      push_event(*job, JobEvent{"preview", {{"t", t}, {"name", name}, {"png", b64(png)}}});
    };
    const RunResult result = run(*backend_, bank->bank, job->spec.kind, job->config, text, options);
    if (result.cancelled) {
      std::lock_guard lock(mutex_);
      job->inference_seconds = result.inference_seconds;
      // a shutdown leaves the job non-terminal so the next start re-queues it
      if (job->cancel_requested) set_phase(*job, JobPhase::cancelled);
      return;
    }
    write_atomic(job_dir(job->id) / "result.png", encode_png(backend_->decode(result.z0)));
    std::lock_guard lock(mutex_);
    job->inference_seconds = result.inference_seconds;
    job->eta = result.eta;
    job->has_result = true;
    set_phase(*job, JobPhase::done);
  } catch (const std::exception& e) {
    std::lock_guard lock(mutex_);
    job->error = e.what();
    set_phase(*job, JobPhase::failed);
  }
}

}  // namespace featguide
