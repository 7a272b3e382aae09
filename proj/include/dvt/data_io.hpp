#pragma once

#include <string>

#include "dvt/cascade.hpp"
#include "dvt/solver.hpp"

namespace dvt {

struct DatasetHandle {
  std::string name;
  int classes = 0;
  int channels = 0, height = 0, width = 0;
  Tensor images;  // [n, channels, height, width], pixel values in [0,1]
  std::vector<int> labels;
};

// IDX image/label pairs (train-images-idx3-ubyte etc.) under `dir`.
DatasetHandle load_mnist(const std::string& dir, const std::string& split);
// data_batch_1..5.bin / test_batch.bin under `dir`.
DatasetHandle load_cifar10(const std::string& dir, const std::string& split);
DatasetHandle load_dataset(const std::string& name, const std::string& dir,
                           const std::string& split);

// Pixel-only batch augmentation; labels are untouched by construction.
//  - "none": returns the input unchanged.
//  - "crop-flip": 4px reflect pad, random crop back to size, horizontal flip
//    with probability 1/2; draws consume `rng` per image in batch order.
Tensor augment_batch(const Tensor& images, const std::string& policy, Rng& rng);

// Checkpoint: a text header (magic line, one-line JSON manifest listing the
// model config, seed, and per-tensor name/shape/offset/FNV-1a checksum)
// followed by a little-endian float64 payload. Writes take an advisory
// .lock file and go through a temp file renamed on success.
void save_checkpoint(const std::string& path, const CascadeConfig& cfg,
                     CascadeParams& params, std::uint64_t seed);

struct CheckpointInfo {
  CascadeConfig config;
  std::uint64_t seed = 0;
};
CheckpointInfo load_checkpoint(const std::string& path, CascadeParams& out);

// Trace: text header (sample count, exits, classes, per-exit FLOPs) followed
// by binary records (uint32 label, exits*classes float64 probabilities, all
// little-endian).
void save_trace(const std::string& path, const ExitTrace& trace);
ExitTrace load_trace(const std::string& path);

// Header: budget,accuracy,mean_flops,eta_1,...,eta_{K-1}
void write_sweep_csv(const std::string& path,
                     const std::vector<SweepPoint>& points, int num_exits);

}  // namespace dvt
