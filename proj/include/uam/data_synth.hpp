#pragma once

#include <cstdint>
#include <string>

#include "uam/data.hpp"

namespace uam::data {

struct SyntheticConfig {
  std::uint64_t seed = 2024;
  int train_count = 60000;
  int test_count = 10000;
  double noise_sigma = 0.18;
  int max_shift = 2;
};

struct RawMnist {
  IdxTensor train_images;
  IdxTensor train_labels;
  IdxTensor test_images;
  IdxTensor test_labels;
};

/// Deterministic digit-like fixture corpus in the standard IDX layout:
/// ten seeded stroke prototypes, sampled with translation jitter,
/// amplitude jitter and pixel noise. Lets the harness run end to end when
/// the real corpus is not on disk.
RawMnist make_synthetic_mnist(const SyntheticConfig& config = {});

/// Writes the four standard files (train/t10k images/labels) to dir.
void write_mnist_dir(const RawMnist& raw, const std::string& dir,
                     bool gzip = false);

/// Loads the four standard files from a directory; accepts .gz variants.
RawMnist load_mnist_dir(const std::string& dir);

bool mnist_dir_present(const std::string& dir);

}  // namespace uam::data
