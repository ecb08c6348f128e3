#include "uam/data_synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <vector>

#include "uam/rng.hpp"

namespace uam::data {

namespace {

constexpr int kSide = 28;

using Proto = std::array<double, kSide * kSide>;

Proto blur3x3(const Proto& in) {
  Proto out{};
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      double sum = 0.0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= kSide || xx < 0 || xx >= kSide) continue;
          sum += in[static_cast<std::size_t>(yy * kSide + xx)];
          ++n;
        }
      }
      out[static_cast<std::size_t>(y * kSide + x)] = sum / n;
    }
  }
  return out;
}

Proto make_prototype(std::uint64_t seed) {
  Rng rng(seed);
  Proto p{};
  constexpr int kStrokes = 4;
  constexpr int kSteps = 22;
  const std::array<std::array<int, 2>, 8> dirs = {
      {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {1, -1}, {-1, 1}, {-1, -1}}};
  for (int s = 0; s < kStrokes; ++s) {
    int x = 4 + static_cast<int>(rng.below(kSide - 8));
    int y = 4 + static_cast<int>(rng.below(kSide - 8));
    std::size_t d = rng.below(8);
    for (int step = 0; step < kSteps; ++step) {
      for (int dy = 0; dy <= 1; ++dy) {
        for (int dx = 0; dx <= 1; ++dx) {
          const int yy = std::clamp(y + dy, 0, kSide - 1);
          const int xx = std::clamp(x + dx, 0, kSide - 1);
          p[static_cast<std::size_t>(yy * kSide + xx)] = 1.0;
        }
      }
      if (rng.uniform01() < 0.35) d = rng.below(8);
      x = std::clamp(x + dirs[d][0], 2, kSide - 3);
      y = std::clamp(y + dirs[d][1], 2, kSide - 3);
    }
  }
  p = blur3x3(blur3x3(p));
  double peak = 0.0;
  for (double v : p) peak = std::max(peak, v);
  if (peak > 0.0) {
    for (double& v : p) v /= peak;
  }
  return p;
}

void fill_samples(std::span<const Proto> protos, const SyntheticConfig& cfg,
                  int count, std::uint64_t stream_seed,
                  std::vector<std::uint8_t>& pixels,
                  std::vector<std::uint8_t>& labels) {
  Rng rng(stream_seed);
  pixels.resize(static_cast<std::size_t>(count) * kSide * kSide);
  labels.resize(static_cast<std::size_t>(count));
  const int span = 2 * cfg.max_shift + 1;
  for (int i = 0; i < count; ++i) {
    const int label = static_cast<int>(rng.below(10));
    labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(label);
    const auto& proto = protos[static_cast<std::size_t>(label)];
    const int dx = static_cast<int>(rng.below(static_cast<std::uint64_t>(span))) -
                   cfg.max_shift;
    const int dy = static_cast<int>(rng.below(static_cast<std::uint64_t>(span))) -
                   cfg.max_shift;
    const double amp = 0.7 + 0.3 * rng.uniform01();
    std::uint8_t* out =
        pixels.data() + static_cast<std::size_t>(i) * kSide * kSide;
    for (int y = 0; y < kSide; ++y) {
      for (int x = 0; x < kSide; ++x) {
        const int sy = y - dy, sx = x - dx;
        double v = 0.0;
        if (sy >= 0 && sy < kSide && sx >= 0 && sx < kSide) {
          v = amp * proto[static_cast<std::size_t>(sy * kSide + sx)];
        }
        v += cfg.noise_sigma * rng.normal();
        v = std::clamp(v, 0.0, 1.0);
        out[y * kSide + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
}

IdxTensor image_tensor(std::vector<std::uint8_t> pixels, int count) {
  IdxTensor t;
  t.dims = {static_cast<std::uint32_t>(count), kSide, kSide};
  t.payload = std::move(pixels);
  return t;
}

IdxTensor label_tensor(std::vector<std::uint8_t> labels) {
  IdxTensor t;
  t.dims = {static_cast<std::uint32_t>(labels.size())};
  t.payload = std::move(labels);
  return t;
}

const std::array<const char*, 4> kFileNames = {
    "train-images-idx3-ubyte", "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"};

std::string resolve(const std::string& dir, const char* name) {
  namespace fs = std::filesystem;
  const fs::path plain = fs::path(dir) / name;
  if (fs::exists(plain)) return plain.string();
  const fs::path gz = fs::path(dir) / (std::string(name) + ".gz");
  if (fs::exists(gz)) return gz.string();
  return {};
}

}  // namespace

RawMnist make_synthetic_mnist(const SyntheticConfig& cfg) {
  std::array<Proto, 10> protos;
  for (int c = 0; c < 10; ++c) {
    protos[static_cast<std::size_t>(c)] =
        make_prototype(mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(c)));
  }
  RawMnist raw;
  std::vector<std::uint8_t> pixels, labels;
  fill_samples(protos, cfg, cfg.train_count, mix_seed(cfg.seed, 1), pixels,
               labels);
  raw.train_images = image_tensor(std::move(pixels), cfg.train_count);
  raw.train_labels = label_tensor(std::move(labels));
  fill_samples(protos, cfg, cfg.test_count, mix_seed(cfg.seed, 2), pixels,
               labels);
  raw.test_images = image_tensor(std::move(pixels), cfg.test_count);
  raw.test_labels = label_tensor(std::move(labels));
  return raw;
}

void write_mnist_dir(const RawMnist& raw, const std::string& dir, bool gzip) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::array<const IdxTensor*, 4> tensors = {
      &raw.train_images, &raw.train_labels, &raw.test_images, &raw.test_labels};
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto bytes = serialize_idx(*tensors[i]);
    std::string path = (fs::path(dir) / kFileNames[i]).string();
    if (gzip) {
      bytes = gzip_compress(bytes);
      path += ".gz";
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
}

RawMnist load_mnist_dir(const std::string& dir) {
  std::array<std::string, 4> paths;
  for (std::size_t i = 0; i < kFileNames.size(); ++i) {
    paths[i] = resolve(dir, kFileNames[i]);
    if (paths[i].empty()) {
      throw std::runtime_error(std::string("missing MNIST file ") +
                               kFileNames[i] + " (or .gz) in " + dir);
    }
  }
  RawMnist raw;
  raw.train_images = load_idx_file(paths[0]);
  raw.train_labels = load_idx_file(paths[1]);
  raw.test_images = load_idx_file(paths[2]);
  raw.test_labels = load_idx_file(paths[3]);
  return raw;
}

bool mnist_dir_present(const std::string& dir) {
  for (const char* name : kFileNames) {
    if (resolve(dir, name).empty()) return false;
  }
  return true;
}

}  // namespace uam::data
