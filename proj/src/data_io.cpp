#include "dvt/data_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dvt/run_config.hpp"

namespace dvt {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// ---- low-level byte helpers --------------------------------------------------

std::uint32_t read_u32_be(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw DataError("unexpected end of file reading " + what);
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void put_u32_le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<char*>(b), 4);
}

std::uint32_t read_u32_le(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw DataError("unexpected end of file reading " + what);
  }
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

void put_f64_le(std::ostream& out, double v) {
  const std::uint64_t u = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  out.write(reinterpret_cast<char*>(b), 8);
}

double read_f64_le(std::istream& in, const std::string& what) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) {
    throw DataError("unexpected end of file reading " + what);
  }
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= std::uint64_t(b[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

std::uint64_t fnv1a64(const unsigned char* data, std::size_t len) {
  std::uint64_t h = 14695981039346656037ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Writes to <path>.tmp and renames on commit; the temp file is removed if the
// writer is destroyed uncommitted, so failures leave no partial output.
class AtomicFileWriter {
 public:
  explicit AtomicFileWriter(const std::string& path)
      : path_(path), tmp_(path + ".tmp") {
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw DataError("cannot open for writing: " + tmp_);
  }
  ~AtomicFileWriter() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      fs::remove(tmp_, ec);
    }
  }
  std::ostream& stream() { return out_; }
  void commit() {
    out_.flush();
    if (!out_) throw DataError("write failed: " + tmp_);
    out_.close();
    fs::rename(tmp_, path_);
    committed_ = true;
  }

 private:
  std::string path_, tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

// Advisory exclusive lock; holding the file's existence, not flock, keeps the
// scheme portable.
class LockFile {
 public:
  explicit LockFile(const std::string& target) : path_(target + ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
      throw DataError("checkpoint is locked by another writer: " + path_);
    }
    std::fclose(f);
  }
  ~LockFile() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  std::string path_;
};

std::vector<unsigned char> read_file_bytes(const std::string& path,
                                           const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + what + ": " + path);
  in.seekg(0, std::ios::end);
  const std::streamoff len = in.tellg();
  in.seekg(0);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(len));
  if (len > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), len)) {
    throw DataError("failed reading " + what + ": " + path);
  }
  return bytes;
}

}  // namespace

// ---- datasets ------------------------------------------------------------------

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

DatasetHandle load_idx_pair(const std::string& images_path,
                            const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw DataError("cannot open image file: " + images_path);
  if (read_u32_be(imgs, "image magic") != kIdxImagesMagic) {
    throw DataError("bad magic in image file (want 0x00000803): " + images_path);
  }
  const std::uint32_t n = read_u32_be(imgs, "image count");
  const std::uint32_t rows = read_u32_be(imgs, "row count");
  const std::uint32_t cols = read_u32_be(imgs, "column count");
  if (n == 0 || rows == 0 || cols == 0) {
    throw DataError("empty image file: " + images_path);
  }
  std::vector<unsigned char> pixels(static_cast<std::size_t>(n) * rows * cols);
  if (!imgs.read(reinterpret_cast<char*>(pixels.data()), pixels.size())) {
    throw DataError("truncated pixel data in " + images_path);
  }

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw DataError("cannot open label file: " + labels_path);
  if (read_u32_be(labs, "label magic") != kIdxLabelsMagic) {
    throw DataError("bad magic in label file (want 0x00000801): " + labels_path);
  }
  const std::uint32_t ln = read_u32_be(labs, "label count");
  if (ln != n) {
    throw DataError("label count " + std::to_string(ln) +
                    " != image count " + std::to_string(n));
  }
  std::vector<unsigned char> raw_labels(n);
  if (!labs.read(reinterpret_cast<char*>(raw_labels.data()), n)) {
    throw DataError("truncated label data in " + labels_path);
  }

  DatasetHandle d;
  d.name = "mnist";
  d.classes = 10;
  d.channels = 1;
  d.height = static_cast<int>(rows);
  d.width = static_cast<int>(cols);
  d.images = Tensor::zeros({static_cast<int>(n), 1, d.height, d.width});
  auto& iv = d.images.data();
  for (std::size_t i = 0; i < pixels.size(); ++i) iv[i] = pixels[i] / 255.0;
  d.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (raw_labels[i] > 9) {
      throw DataError("label value " + std::to_string(raw_labels[i]) +
                      " out of range in " + labels_path);
    }
    d.labels[i] = raw_labels[i];
  }
  return d;
}

}  // namespace

DatasetHandle load_mnist(const std::string& dir, const std::string& split) {
  if (split == "train") {
    return load_idx_pair(dir + "/train-images-idx3-ubyte",
                         dir + "/train-labels-idx1-ubyte");
  }
  if (split == "test") {
    return load_idx_pair(dir + "/t10k-images-idx3-ubyte",
                         dir + "/t10k-labels-idx1-ubyte");
  }
  throw UsageError("mnist split must be 'train' or 'test', got '" + split + "'");
}

DatasetHandle load_cifar10(const std::string& dir, const std::string& split) {
  std::vector<std::string> files;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i) {
      files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
    }
  } else if (split == "test") {
    files.push_back(dir + "/test_batch.bin");
  } else {
    throw UsageError("cifar10 split must be 'train' or 'test', got '" + split + "'");
  }
  constexpr std::size_t kRecord = 3073;  // label byte + 3*32*32 pixels
  constexpr int kSide = 32;
  std::vector<unsigned char> all;
  for (const std::string& f : files) {
    std::vector<unsigned char> bytes = read_file_bytes(f, "cifar batch");
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw DataError("cifar batch size " + std::to_string(bytes.size()) +
                      " is not a multiple of 3073: " + f);
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  const std::size_t n = all.size() / kRecord;
  DatasetHandle d;
  d.name = "cifar10";
  d.classes = 10;
  d.channels = 3;
  d.height = kSide;
  d.width = kSide;
  d.images = Tensor::zeros({static_cast<int>(n), 3, kSide, kSide});
  d.labels.resize(n);
  auto& iv = d.images.data();
  const std::size_t plane = static_cast<std::size_t>(kSide) * kSide;
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = all.data() + r * kRecord;
    if (rec[0] > 9) {
      throw DataError("label value " + std::to_string(rec[0]) +
                      " out of range in record " + std::to_string(r));
    }
    d.labels[r] = rec[0];
    for (std::size_t j = 0; j < 3 * plane; ++j) {
      iv[r * 3 * plane + j] = rec[1 + j] / 255.0;
    }
  }
  return d;
}

DatasetHandle load_dataset(const std::string& name, const std::string& dir,
                           const std::string& split) {
  if (name == "mnist") return load_mnist(dir, split);
  if (name == "cifar10") return load_cifar10(dir, split);
  throw UsageError("unknown dataset '" + name + "'");
}

Tensor augment_batch(const Tensor& images, const std::string& policy, Rng& rng) {
  if (policy == "none") return images;
  if (policy != "crop-flip") {
    throw UsageError("unknown augmentation policy '" + policy + "'");
  }
  if (images.ndim() != 4) throw ShapeError("augment_batch: images must be 4-d");
  const int b = images.dim(0), c = images.dim(1);
  const int h = images.dim(2), w = images.dim(3);
  constexpr int kPad = 4;
  if (h <= kPad || w <= kPad) {
    throw ShapeError("augment_batch: image too small for 4px reflect pad");
  }
  auto reflect = [](int v, int size) {
    if (v < 0) return -v;
    if (v >= size) return 2 * size - 2 - v;
    return v;
  };
  Tensor out = Tensor::zeros(images.shape());
  const auto& iv = images.data();
  auto& ov = out.data();
  for (int bi = 0; bi < b; ++bi) {
    const int oy = static_cast<int>(rng.integer(2 * kPad + 1));
    const int ox = static_cast<int>(rng.integer(2 * kPad + 1));
    const bool flip = rng.uniform() < 0.5;
    for (int ci = 0; ci < c; ++ci) {
      const std::size_t base = (static_cast<std::size_t>(bi) * c + ci) *
                               static_cast<std::size_t>(h) * w;
      for (int y = 0; y < h; ++y) {
        const int sy = reflect(y + oy - kPad, h);
        for (int x = 0; x < w; ++x) {
          const int xx = flip ? (w - 1 - x) : x;
          const int sx = reflect(xx + ox - kPad, w);
          ov[base + static_cast<std::size_t>(y) * w + x] =
              iv[base + static_cast<std::size_t>(sy) * w + sx];
        }
      }
    }
  }
  return out;
}

// ---- checkpoints -----------------------------------------------------------------

namespace {
constexpr const char* kCheckpointMagic = "DVT-CHECKPOINT v1";
constexpr const char* kTraceMagic = "DVT-TRACE v1";
}  // namespace

void save_checkpoint(const std::string& path, const CascadeConfig& cfg,
                     CascadeParams& params, std::uint64_t seed) {
  LockFile lock(path);
  ordered_json tensors = ordered_json::array();
  std::string payload;
  visit_cascade_params(params, cfg, [&](const std::string& name, Tensor& t) {
    std::string bytes;
    bytes.reserve(t.numel() * 8);
    for (double v : t.data()) {
      const std::uint64_t u = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
      }
    }
    ordered_json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = payload.size();
    entry["bytes"] = bytes.size();
    entry["checksum"] = hex64(
        fnv1a64(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
    tensors.push_back(std::move(entry));
    payload += bytes;
  });
  ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["seed"] = seed;
  manifest["config"] = ordered_json::parse(cascade_config_to_json(cfg));
  manifest["tensors"] = std::move(tensors);

  AtomicFileWriter writer(path);
  writer.stream() << kCheckpointMagic << "\n" << manifest.dump() << "\n";
  writer.stream().write(payload.data(), static_cast<std::streamsize>(payload.size()));
  writer.commit();
}

CheckpointInfo load_checkpoint(const std::string& path, CascadeParams& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::string magic, manifest_line;
  if (!std::getline(in, magic) || magic != kCheckpointMagic) {
    throw DataError("bad checkpoint magic in " + path);
  }
  if (!std::getline(in, manifest_line)) {
    throw DataError("missing checkpoint manifest in " + path);
  }
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(manifest_line);
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid checkpoint manifest: ") + e.what());
  }
  if (!manifest.contains("format_version") ||
      manifest["format_version"].get<int>() != 1) {
    throw DataError("unsupported checkpoint format version");
  }
  CheckpointInfo info;
  info.seed = manifest.value("seed", 0ULL);
  info.config = cascade_config_from_json(manifest.at("config").dump());

  const std::streamoff payload_start = in.tellg();
  std::vector<unsigned char> payload;
  {
    in.seekg(0, std::ios::end);
    const std::streamoff end = in.tellg();
    payload.resize(static_cast<std::size_t>(end - payload_start));
    in.seekg(payload_start);
    if (!payload.empty() &&
        !in.read(reinterpret_cast<char*>(payload.data()), payload.size())) {
      throw DataError("truncated checkpoint payload in " + path);
    }
  }

  // Build parameter storage with the recorded architecture, then overwrite
  // every tensor from the payload.
  Cascade skeleton(info.config, 0);
  out = std::move(skeleton.params);

  std::size_t cursor = 0;
  const auto& tensors = manifest.at("tensors");
  visit_cascade_params(out, info.config, [&](const std::string& name, Tensor& t) {
    if (cursor >= tensors.size()) {
      throw DataError("checkpoint manifest missing tensor '" + name + "'");
    }
    const auto& entry = tensors[cursor++];
    if (entry.at("name").get<std::string>() != name) {
      throw DataError("checkpoint tensor order mismatch: expected '" + name +
                      "', found '" + entry.at("name").get<std::string>() + "'");
    }
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != t.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " +
                      shape_str(shape) + ", model expects " + shape_str(t.shape()));
    }
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t bytes = entry.at("bytes").get<std::size_t>();
    if (bytes != t.data().size() * 8 || offset + bytes > payload.size()) {
      throw DataError("checkpoint tensor '" + name +
                      "' payload truncated or out of range");
    }
    const std::string sum = hex64(fnv1a64(payload.data() + offset, bytes));
    if (sum != entry.at("checksum").get<std::string>()) {
      throw DataError("checkpoint tensor '" + name + "' checksum mismatch");
    }
    for (std::size_t i = 0; i < t.data().size(); ++i) {
      std::uint64_t u = 0;
      for (int bidx = 0; bidx < 8; ++bidx) {
        u |= std::uint64_t(payload[offset + i * 8 + bidx]) << (8 * bidx);
      }
      t.data()[i] = std::bit_cast<double>(u);
    }
  });
  if (cursor != tensors.size()) {
    throw DataError("checkpoint contains extra tensors");
  }
  return info;
}

// ---- traces ------------------------------------------------------------------------

void save_trace(const std::string& path, const ExitTrace& trace) {
  trace.validate();
  AtomicFileWriter writer(path);
  std::ostream& out = writer.stream();
  out << kTraceMagic << "\n";
  out << "samples=" << trace.size() << " exits=" << trace.num_exits
      << " classes=" << trace.num_classes << "\n";
  out << "flops=";
  char buf[32];
  for (int e = 0; e < trace.num_exits; ++e) {
    std::snprintf(buf, sizeof(buf), "%.17g", trace.exit_flops[e]);
    out << (e ? "," : "") << buf;
  }
  out << "\n";
  for (std::int64_t s = 0; s < trace.size(); ++s) {
    put_u32_le(out, static_cast<std::uint32_t>(trace.labels[s]));
    const std::size_t base =
        static_cast<std::size_t>(s) * trace.num_exits * trace.num_classes;
    for (int j = 0; j < trace.num_exits * trace.num_classes; ++j) {
      put_f64_le(out, trace.probs[base + j]);
    }
  }
  writer.commit();
}

ExitTrace load_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open trace: " + path);
  std::string magic;
  if (!std::getline(in, magic) || magic != kTraceMagic) {
    throw DataError("bad trace magic in " + path);
  }
  std::string counts_line, flops_line;
  if (!std::getline(in, counts_line) || !std::getline(in, flops_line)) {
    throw DataError("truncated trace header in " + path);
  }
  ExitTrace t;
  long long samples = 0;
  if (std::sscanf(counts_line.c_str(), "samples=%lld exits=%d classes=%d",
                  &samples, &t.num_exits, &t.num_classes) != 3) {
    throw DataError("malformed trace counts line: '" + counts_line + "'");
  }
  if (samples < 1) throw DataError("trace has no samples");
  if (flops_line.rfind("flops=", 0) != 0) {
    throw DataError("malformed trace flops line: '" + flops_line + "'");
  }
  {
    std::istringstream fs(flops_line.substr(6));
    std::string item;
    while (std::getline(fs, item, ',')) {
      try {
        t.exit_flops.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw DataError("bad flops value '" + item + "' in trace header");
      }
    }
  }
  if (static_cast<int>(t.exit_flops.size()) != t.num_exits) {
    throw DataError("trace flops count != exits");
  }
  t.labels.resize(samples);
  t.probs.resize(static_cast<std::size_t>(samples) * t.num_exits * t.num_classes);
  for (std::int64_t s = 0; s < samples; ++s) {
    t.labels[s] = static_cast<int>(read_u32_le(in, "trace label"));
    const std::size_t base =
        static_cast<std::size_t>(s) * t.num_exits * t.num_classes;
    for (int j = 0; j < t.num_exits * t.num_classes; ++j) {
      t.probs[base + j] = read_f64_le(in, "trace probabilities");
    }
  }
  t.validate();
  return t;
}

void write_sweep_csv(const std::string& path,
                     const std::vector<SweepPoint>& points, int num_exits) {
  AtomicFileWriter writer(path);
  std::ostream& out = writer.stream();
  out << "budget,accuracy,mean_flops";
  for (int i = 1; i < num_exits; ++i) out << ",eta_" << i;
  out << "\n";
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
  };
  for (const SweepPoint& p : points) {
    put(p.budget);
    out << ",";
    put(p.result.accuracy);
    out << ",";
    put(p.result.mean_flops);
    for (double t : p.result.thresholds.values) {
      out << ",";
      put(t);
    }
    out << "\n";
  }
  writer.commit();
}

}  // namespace dvt
