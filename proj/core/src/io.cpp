#include "cf/io.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <map>

#include "cf/error.hpp"

namespace cf {

namespace {

constexpr char kTensorMagic[4] = {'C', 'F', 'T', 'N'};
constexpr char kCheckpointMagic[4] = {'C', 'F', 'K', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u8(std::ofstream& out, std::uint8_t v) { write_bytes(out, &v, 1); }

void write_u32(std::ofstream& out, std::uint32_t v) {
  std::uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  write_bytes(out, b, 4);
}

void write_u64(std::ofstream& out, std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  write_bytes(out, b, 8);
}

void write_f32(std::ofstream& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(out, u);
}

void write_f64(std::ofstream& out, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  write_u64(out, u);
}

void read_bytes(std::ifstream& in, void* p, std::size_t n, const std::string& path) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw IoError("truncated file: " + path);
}

std::uint8_t read_u8(std::ifstream& in, const std::string& path) {
  std::uint8_t v;
  read_bytes(in, &v, 1, path);
  return v;
}

std::uint32_t read_u32(std::ifstream& in, const std::string& path) {
  std::uint8_t b[4];
  read_bytes(in, b, 4, path);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::ifstream& in, const std::string& path) {
  std::uint8_t b[8];
  read_bytes(in, b, 8, path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

float read_f32(std::ifstream& in, const std::string& path) {
  std::uint32_t u = read_u32(in, path);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

double read_f64(std::ifstream& in, const std::string& path) {
  std::uint64_t u = read_u64(in, path);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return in;
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t fnv1a64_file(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  std::uint64_t h = 14695981039346656037ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    const auto got = static_cast<std::size_t>(in.gcount());
    for (std::size_t i = 0; i < got; ++i) {
      h ^= static_cast<std::uint8_t>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::uint64_t TensorData::count() const {
  std::uint64_t n = 1;
  for (std::uint64_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

void write_tensor(const std::filesystem::path& path, const std::vector<std::uint64_t>& shape,
                  const double* values, TensorDtype dtype) {
  if (shape.empty()) throw ParameterError("tensor.shape: must have rank >= 1");
  std::uint64_t count = 1;
  for (std::uint64_t d : shape) {
    if (d == 0) throw ParameterError("tensor.shape: zero dimension");
    count *= d;
  }
  std::ofstream out = open_out(path);
  write_bytes(out, kTensorMagic, 4);
  write_u8(out, static_cast<std::uint8_t>(dtype));
  write_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (std::uint64_t d : shape) write_u64(out, d);
  if (dtype == TensorDtype::kF32) {
    for (std::uint64_t i = 0; i < count; ++i) write_f32(out, static_cast<float>(values[i]));
  } else {
    for (std::uint64_t i = 0; i < count; ++i) write_f64(out, values[i]);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

TensorData read_tensor(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  const std::string name = path.string();
  char magic[4];
  read_bytes(in, magic, 4, name);
  if (std::memcmp(magic, kTensorMagic, 4) != 0)
    throw IoError("bad tensor magic in " + name);
  const auto dtype = static_cast<TensorDtype>(read_u8(in, name));
  if (dtype != TensorDtype::kF32 && dtype != TensorDtype::kF64)
    throw IoError("unknown tensor dtype in " + name);
  const std::uint32_t rank = read_u32(in, name);
  if (rank == 0 || rank > 8) throw IoError("bad tensor rank in " + name);
  TensorData t;
  t.shape.resize(rank);
  std::uint64_t count = 1;
  for (auto& d : t.shape) {
    d = read_u64(in, name);
    if (d == 0 || count > (std::uint64_t{1} << 40) / d)
      throw IoError("bad tensor shape in " + name);
    count *= d;
  }
  t.values.resize(count);
  if (dtype == TensorDtype::kF32) {
    for (auto& v : t.values) v = static_cast<double>(read_f32(in, name));
  } else {
    for (auto& v : t.values) v = read_f64(in, name);
  }
  return t;
}

namespace {

void write_model_config(std::ofstream& out, const ModelConfig& c) {
  write_u64(out, static_cast<std::uint64_t>(c.dim));
  write_u64(out, static_cast<std::uint64_t>(c.n_layers));
  write_u64(out, static_cast<std::uint64_t>(c.n_heads));
  write_u64(out, static_cast<std::uint64_t>(c.patch_size));
  write_u64(out, static_cast<std::uint64_t>(c.grid_side));
  write_u64(out, static_cast<std::uint64_t>(c.token_dim));
  write_u64(out, static_cast<std::uint64_t>(c.n_classes));
  write_u64(out, static_cast<std::uint64_t>(c.n_class_tokens));
  write_u64(out, static_cast<std::uint64_t>(c.class_token_repeat));
  write_u32(out, static_cast<std::uint32_t>(c.pos_embed));
  write_u32(out, c.qk_norm ? 1 : 0);
}

ModelConfig read_model_config(std::ifstream& in, const std::string& path) {
  ModelConfig c;
  c.dim = static_cast<Index>(read_u64(in, path));
  c.n_layers = static_cast<Index>(read_u64(in, path));
  c.n_heads = static_cast<Index>(read_u64(in, path));
  c.patch_size = static_cast<Index>(read_u64(in, path));
  c.grid_side = static_cast<Index>(read_u64(in, path));
  c.token_dim = static_cast<Index>(read_u64(in, path));
  c.n_classes = static_cast<Index>(read_u64(in, path));
  c.n_class_tokens = static_cast<Index>(read_u64(in, path));
  c.class_token_repeat = static_cast<Index>(read_u64(in, path));
  const std::uint32_t pe = read_u32(in, path);
  if (pe > 1) throw IoError("bad pos_embed tag in " + path);
  c.pos_embed = static_cast<PosEmbedKind>(pe);
  c.qk_norm = read_u32(in, path) != 0;
  c.validate();
  return c;
}

void write_named_tensors(std::ofstream& out, const ModelParams& p, const std::string& prefix) {
  p.for_each([&](const std::string& name, const Mat& m) {
    const std::string full = prefix + name;
    write_u32(out, static_cast<std::uint32_t>(full.size()));
    write_bytes(out, full.data(), full.size());
    write_u32(out, 2);
    write_u64(out, static_cast<std::uint64_t>(m.rows()));
    write_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) write_f32(out, static_cast<float>(m.data()[i]));
  });
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams& params, const ModelParams* ema) {
  Index n_tensors = 0;
  params.for_each([&](const std::string&, const Mat&) { ++n_tensors; });
  std::ofstream out = open_out(path);
  write_bytes(out, kCheckpointMagic, 4);
  write_u32(out, kCheckpointVersion);
  write_model_config(out, config);
  write_u64(out, static_cast<std::uint64_t>(ema ? 2 * n_tensors : n_tensors));
  write_named_tensors(out, params, "");
  if (ema) write_named_tensors(out, *ema, "ema/");
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  const std::string name = path.string();
  char magic[4];
  read_bytes(in, magic, 4, name);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("bad checkpoint magic in " + name);
  const std::uint32_t version = read_u32(in, name);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + name);

  Checkpoint ck;
  ck.config = read_model_config(in, name);

  // Allocate both parameter sets at the right shapes, then overwrite.
  Rng scratch(0);
  ck.params = init_params(ck.config, scratch);
  ck.ema = zeros_like(ck.params);

  std::map<std::string, Mat*> slots;
  ck.params.for_each([&](const std::string& n, Mat& m) { slots[n] = &m; });
  ck.ema.for_each([&](const std::string& n, Mat& m) { slots["ema/" + n] = &m; });

  std::map<std::string, bool> seen;
  const std::uint64_t n_tensors = read_u64(in, name);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    const std::uint32_t len = read_u32(in, name);
    if (len == 0 || len > 4096) throw IoError("bad tensor name length in " + name);
    std::string tname(len, '\0');
    read_bytes(in, tname.data(), len, name);
    const std::uint32_t rank = read_u32(in, name);
    if (rank != 2) throw IoError("unexpected tensor rank for '" + tname + "' in " + name);
    const auto rows = static_cast<Index>(read_u64(in, name));
    const auto cols = static_cast<Index>(read_u64(in, name));
    auto it = slots.find(tname);
    if (it == slots.end()) throw IoError("unknown tensor '" + tname + "' in " + name);
    Mat& m = *it->second;
    if (m.rows() != rows || m.cols() != cols)
      throw IoError("shape mismatch for tensor '" + tname + "' in " + name);
    for (Index j = 0; j < m.size(); ++j)
      m.data()[j] = static_cast<double>(read_f32(in, name));
    if (tname.rfind("ema/", 0) == 0) ck.has_ema = true;
    seen[tname] = true;
  }

  ck.params.for_each([&](const std::string& n, Mat&) {
    if (!seen.count(n)) throw IoError("missing tensor '" + n + "' in " + name);
  });
  if (ck.has_ema)
    ck.ema.for_each([&](const std::string& n, Mat&) {
      if (!seen.count("ema/" + n)) throw IoError("missing tensor 'ema/" + n + "' in " + name);
    });
  return ck;
}

namespace {

void write_pnm(const std::filesystem::path& path, const char* tag, Index height, Index width,
               Index channels, const std::vector<std::uint8_t>& pixels) {
  if (height < 1 || width < 1) throw ShapeError("image: dimensions must be positive");
  if (static_cast<Index>(pixels.size()) != height * width * channels)
    throw ShapeError("image: pixel buffer size mismatch");
  std::ofstream out = open_out(path);
  out << tag << "\n" << width << " " << height << "\n255\n";
  write_bytes(out, pixels.data(), pixels.size());
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void write_pgm(const std::filesystem::path& path, Index height, Index width,
               const std::vector<std::uint8_t>& pixels) {
  write_pnm(path, "P5", height, width, 1, pixels);
}

void write_ppm(const std::filesystem::path& path, Index height, Index width,
               const std::vector<std::uint8_t>& pixels) {
  write_pnm(path, "P6", height, width, 3, pixels);
}

std::vector<std::uint8_t> tokens_to_gray(const Mat& image, double lo, double hi) {
  if (!(hi > lo)) throw ParameterError("tokens_to_gray: hi must exceed lo");
  std::vector<std::uint8_t> px(static_cast<std::size_t>(image.size()));
  const double scale = 255.0 / (hi - lo);
  for (Index i = 0; i < image.size(); ++i) {
    double v = (image.data()[i] - lo) * scale;
    v = std::max(0.0, std::min(255.0, v));
    px[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v));
  }
  return px;
}

MetricsLog::MetricsLog(const std::filesystem::path& path)
    : out_(path, std::ios::trunc) {
  if (!out_) throw IoError("cannot open for writing: " + path.string());
}

void MetricsLog::append(Index step, const std::string& key, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  out_ << step << '\t' << key << '\t' << buf << '\n';
}

void MetricsLog::flush() { out_.flush(); }

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::vector<MetricsRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos) throw IoError("malformed metrics line: " + line);
    MetricsRow r;
    r.step = std::stoll(line.substr(0, tab1));
    r.key = line.substr(tab1 + 1, tab2 - tab1 - 1);
    r.value = std::stod(line.substr(tab2 + 1));
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_manifest(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file()) {
      fs::path rel = fs::relative(entry.path(), dir);
      if (rel == fs::path("manifest.tsv")) continue;
      files.push_back(std::move(rel));
    }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.generic_string() < b.generic_string(); });

  std::ofstream out(dir / "manifest.tsv", std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + (dir / "manifest.tsv").string());
  for (const auto& rel : files) {
    const fs::path full = dir / rel;
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a64_file(full)));
    out << rel.generic_string() << '\t' << fs::file_size(full) << '\t' << hex << '\n';
  }
  if (!out) throw IoError("write failed: " + (dir / "manifest.tsv").string());
}

}  // namespace cf
