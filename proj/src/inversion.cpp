#include "featguide/inversion.hpp"

#include <bit>
#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "featguide/ddim.hpp"

namespace featguide {

using nlohmann::json;

namespace {

struct StreamStep {
  Latent z;
  AttentionRecord kv;
};

// Runs the inversion recursion for one stream, returning (z_t, K/V_t) for t = 1..T.
std::vector<StreamStep> invert_stream(const Backend& backend, const NoiseSchedule& schedule, const Latent& z0,
                                      const TextCondition& text, const InversionOptions& options) {
  const int steps = schedule.steps();
  std::vector<StreamStep> out;
  out.reserve(static_cast<std::size_t>(steps));
  Latent z = z0;
  for (int t = 0;; ++t) {
    DenoiseOutput pred = backend.predict(z, schedule.timestep(t), text, nullptr, CaptureFlags{.attention = true});
    if (t >= 1) out.push_back(StreamStep{z, std::move(*pred.attention)});
    if (t == steps) break;
    const double a_from = schedule.alpha_bar(t), a_to = schedule.alpha_bar(t + 1);
    Latent next{ddim_transfer(z.data, pred.noise_pred.data, a_from, a_to), SpaceTag::latent};
    for (int i = 0; i < options.refine_iterations; ++i) {
      const DenoiseOutput at_next = backend.predict(next, schedule.timestep(t + 1), text, nullptr, CaptureFlags{});
      next.data = ddim_transfer(z.data, at_next.noise_pred.data, a_from, a_to);
    }
    if (!next.data.all_finite()) {
      throw std::runtime_error("inversion: non-finite latent at step " + std::to_string(t + 1));
    }
    z = std::move(next);
  }
  return out;
}

void write_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64(std::string_view bytes, std::size_t& pos) {
  if (pos + 8 > bytes.size()) throw ContractError("tensor blob truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string step_file(int t) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%04d.bin", t);
  return name;
}

void append_record(std::vector<const Tensor*>& list, const AttentionRecord& record) {
  for (const AttentionSite& site : record.sites) {
    list.push_back(&site.keys);
    list.push_back(&site.values);
  }
}

AttentionRecord take_record(std::vector<Tensor>& tensors, std::size_t& pos, std::size_t sites) {
  AttentionRecord record;
  for (std::size_t s = 0; s < sites; ++s) {
    record.sites.push_back(AttentionSite{std::move(tensors.at(pos)), std::move(tensors.at(pos + 1))});
    pos += 2;
  }
  return record;
}

}  // namespace

MemoryBank invert(const Backend& backend, const Latent& z0, const std::optional<Latent>& z0_ref, int steps,
                  const TextCondition& text, const InversionOptions& options) {
  if (z0_ref && z0_ref->data.shape() != z0.data.shape()) {
    throw ContractError("invert: reference latent shape " + shape_string(z0_ref->data.shape()) +
                        " differs from source " + shape_string(z0.data.shape()));
  }
  const auto start = std::chrono::steady_clock::now();
  const NoiseSchedule schedule = backend.schedule(steps);

  MemoryBank bank;
  bank.steps = steps;
  bank.profile_hash = backend.profile().hash();
  bank.prompt = text.prompt;
  bank.has_reference = z0_ref.has_value();

  std::vector<StreamStep> gud = invert_stream(backend, schedule, z0, text, options);
  std::vector<StreamStep> ref;
  if (z0_ref) ref = invert_stream(backend, schedule, *z0_ref, text, options);

  bank.entries.reserve(gud.size());
  for (std::size_t i = 0; i < gud.size(); ++i) {
    BankEntry entry;
    entry.t = static_cast<int>(i) + 1;
    entry.z_gud = std::move(gud[i].z);
    entry.kv_gud = std::move(gud[i].kv);
    if (z0_ref) {
      entry.z_ref = std::move(ref[i].z);
      entry.kv_ref = std::move(ref[i].kv);
    }
    bank.entries.push_back(std::move(entry));
  }
  bank.z_T_gen = bank.entries.back().z_gud;
  bank.preparing_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return bank;
}

const BankEntry& lookup(const MemoryBank& bank, int t) {
  if (t < 1 || t > static_cast<int>(bank.entries.size())) {
    throw ContractError("bank lookup: t = " + std::to_string(t) + " outside [1, " +
                        std::to_string(bank.entries.size()) + "]");
  }
  return bank.entries[static_cast<std::size_t>(t - 1)];
}

std::string encode_tensor_blob(const std::vector<const Tensor*>& tensors) {
  std::string out = "FGTB";
  const auto count = static_cast<std::uint32_t>(tensors.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((count >> (8 * i)) & 0xff));
  for (const Tensor* t : tensors) {
    out.push_back(1);  // dtype: float64
    out.push_back(static_cast<char>(t->rank()));
    for (std::size_t d : t->shape()) write_u64(out, d);
    for (double v : t->values()) write_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::vector<Tensor> decode_tensor_blob(std::string_view bytes) {
  if (bytes.size() < 8 || bytes.substr(0, 4) != "FGTB") throw ContractError("tensor blob: bad magic");
  std::uint32_t count = 0;
  for (int i = 0; i < 4; ++i) count |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
  std::size_t pos = 8;
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::uint32_t n = 0; n < count; ++n) {
    if (pos + 2 > bytes.size()) throw ContractError("tensor blob truncated");
    if (bytes[pos] != 1) throw ContractError("tensor blob: unsupported dtype tag " + std::to_string(bytes[pos]));
    const auto rank = static_cast<std::size_t>(static_cast<unsigned char>(bytes[pos + 1]));
    pos += 2;
    Shape shape(rank);
    for (std::size_t& d : shape) d = read_u64(bytes, pos);
    Tensor t(shape);
    for (double& v : t.values()) v = std::bit_cast<double>(read_u64(bytes, pos));
    out.push_back(std::move(t));
  }
  if (pos != bytes.size()) throw ContractError("tensor blob: trailing bytes");
  return out;
}

void save_bank(const MemoryBank& bank, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json sites = json::array();
  for (const AttentionSite& s : bank.entries.front().kv_gud.sites) {
    sites.push_back({{"heads", s.heads()}, {"tokens", s.tokens()}, {"head_dim", s.head_dim()}});
  }
  json layout = json::array({"z_gud"});
  for (std::size_t s = 1; s <= sites.size(); ++s) {
    layout.push_back("kv_gud.keys." + std::to_string(s));
    layout.push_back("kv_gud.values." + std::to_string(s));
  }
  if (bank.has_reference) {
    layout.push_back("z_ref");
    for (std::size_t s = 1; s <= sites.size(); ++s) {
      layout.push_back("kv_ref.keys." + std::to_string(s));
      layout.push_back("kv_ref.values." + std::to_string(s));
    }
  }
  const json manifest{{"v", 1},
                      {"steps", bank.steps},
                      {"latent_shape", bank.z_T_gen.data.shape()},
                      {"has_reference", bank.has_reference},
                      {"profile_hash", bank.profile_hash},
                      {"prompt", bank.prompt},
                      {"preparing_seconds", bank.preparing_seconds},
                      {"sites", sites},
                      {"step_blob_layout", layout},
                      {"byte_order", "little"}};

  write_file(dir / "z_T.bin", encode_tensor_blob({&bank.z_T_gen.data}));
  for (const BankEntry& e : bank.entries) {
    std::vector<const Tensor*> list{&e.z_gud.data};
    append_record(list, e.kv_gud);
    if (bank.has_reference) {
      list.push_back(&e.z_ref->data);
      append_record(list, *e.kv_ref);
    }
    write_file(dir / step_file(e.t), encode_tensor_blob(list));
  }
  // manifest last: its presence marks a complete container
  write_file(dir / "manifest.json", manifest.dump(2));
}

MemoryBank load_bank(const std::filesystem::path& dir) {
  const json manifest = json::parse(read_file(dir / "manifest.json"));
  if (manifest.value("v", 0) != 1) throw ContractError("bank manifest: unsupported version");
  MemoryBank bank;
  bank.steps = manifest.at("steps").get<int>();
  bank.has_reference = manifest.at("has_reference").get<bool>();
  bank.profile_hash = manifest.at("profile_hash").get<std::string>();
  bank.prompt = manifest.value("prompt", std::string());
  bank.preparing_seconds = manifest.value("preparing_seconds", 0.0);
  const std::size_t sites = manifest.at("sites").size();

  std::vector<Tensor> zt = decode_tensor_blob(read_file(dir / "z_T.bin"));
  bank.z_T_gen = Latent{std::move(zt.at(0)), SpaceTag::latent};
  for (int t = 1; t <= bank.steps; ++t) {
    std::vector<Tensor> tensors = decode_tensor_blob(read_file(dir / step_file(t)));
    const std::size_t expected = (1 + 2 * sites) * (bank.has_reference ? 2 : 1);
    if (tensors.size() != expected) throw ContractError("bank step " + std::to_string(t) + ": wrong record count");
    BankEntry e;
    e.t = t;
    std::size_t pos = 0;
    e.z_gud = Latent{std::move(tensors[pos++]), SpaceTag::latent};
    e.kv_gud = take_record(tensors, pos, sites);
    if (bank.has_reference) {
      e.z_ref = Latent{std::move(tensors[pos++]), SpaceTag::latent};
      e.kv_ref = take_record(tensors, pos, sites);
    }
    bank.entries.push_back(std::move(e));
  }
  return bank;
}

}  // namespace featguide
