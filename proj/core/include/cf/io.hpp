#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cf/mat.hpp"
#include "cf/model.hpp"

namespace cf {

// FNV-1a over a byte range, then over a whole file.
std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64_file(const std::filesystem::path& path);

// --- Tensor container ------------------------------------------------
// Layout: magic "CFTN", u8 dtype (0 = f32, 1 = f64), u32 rank,
// u64 shape[rank], little-endian payload in row-major order.

enum class TensorDtype : std::uint8_t { kF32 = 0, kF64 = 1 };

struct TensorData {
  std::vector<std::uint64_t> shape;
  std::vector<double> values;  // widened on read regardless of stored dtype

  std::uint64_t count() const;
};

void write_tensor(const std::filesystem::path& path, const std::vector<std::uint64_t>& shape,
                  const double* values, TensorDtype dtype = TensorDtype::kF32);
TensorData read_tensor(const std::filesystem::path& path);

// --- Checkpoints ------------------------------------------------------
// Layout: magic "CFKT", u32 version, serialized model config, u64 tensor
// count, then (name, rank, shape, f32 payload) records. EMA tensors are
// stored under the "ema/" prefix.

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  bool has_ema = false;
  ModelParams ema;
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams& params, const ModelParams* ema);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// --- Images -----------------------------------------------------------
// Binary PGM (P5) and PPM (P6), 8-bit. pixels are row-major, gray or RGB
// interleaved.

void write_pgm(const std::filesystem::path& path, Index height, Index width,
               const std::vector<std::uint8_t>& pixels);
void write_ppm(const std::filesystem::path& path, Index height, Index width,
               const std::vector<std::uint8_t>& pixels);

// Affine map of token values onto [0, 255] with the given value range,
// clamped; returns bytes for the unpatchified image.
std::vector<std::uint8_t> tokens_to_gray(const Mat& image, double lo, double hi);

// --- Metrics log ------------------------------------------------------
// Plain text, one observation per line: step <TAB> key <TAB> value.
// Values print with round-trip precision.

class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);
  void append(Index step, const std::string& key, double value);
  void flush();

 private:
  std::ofstream out_;
};

// Parses a metrics file back into (step, key, value) rows.
struct MetricsRow {
  Index step;
  std::string key;
  double value;
};
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

// --- Run manifest -----------------------------------------------------
// Writes <dir>/manifest.tsv listing every regular file under dir (sorted
// relative paths, the manifest itself excluded) with size and FNV-1a hash.

void write_manifest(const std::filesystem::path& dir);

}  // namespace cf
