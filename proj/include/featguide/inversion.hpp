#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "featguide/backend.hpp"

namespace featguide {

/// Everything the sampler reuses from one inversion step t.
struct BankEntry {
  int t = 0;
  Latent z_gud;
  AttentionRecord kv_gud;
  std::optional<Latent> z_ref;
  std::optional<AttentionRecord> kv_ref;

  bool has_reference() const { return z_ref.has_value(); }
  friend bool operator==(const BankEntry&, const BankEntry&) = default;
};

/// Per-timestep store built by DDIM inversion; entries cover t = 1..T.
/// Immutable once built and safe to share between readers.
struct MemoryBank {
  int steps = 0;
  std::string profile_hash;
  std::string prompt;
  bool has_reference = false;
  Latent z_T_gen;
  std::vector<BankEntry> entries;  // entries[t - 1]
  double preparing_seconds = 0.0;
};

struct InversionOptions {
  /// Fixed-point refinements per step of z_{t+1} = f(z_t, eps(z_{t+1})).
  /// Zero gives the plain explicit recursion.
  int refine_iterations = 4;
};

/// DDIM-inverts z0 (and the optional reference latent) over `steps` steps,
/// capturing the latent and decoder self-attention K/V at every t = 1..T.
MemoryBank invert(const Backend& backend, const Latent& z0, const std::optional<Latent>& z0_ref, int steps,
                  const TextCondition& text, const InversionOptions& options = {});

/// Total on 1..T; throws ContractError otherwise.
const BankEntry& lookup(const MemoryBank& bank, int t);

/// Bank container: `manifest.json` plus one little-endian tensor blob per step.
void save_bank(const MemoryBank& bank, const std::filesystem::path& dir);
MemoryBank load_bank(const std::filesystem::path& dir);

// Tensor blob codec used by the bank container:
//   "FGTB" | u32 count | count x (u8 dtype=1(f64) | u8 rank | rank x u64 dims | raw f64 data)
std::string encode_tensor_blob(const std::vector<const Tensor*>& tensors);
std::vector<Tensor> decode_tensor_blob(std::string_view bytes);

}  // namespace featguide
