#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace uam::data {

/// Decoded IDX container: big-endian magic, dimension sizes, raw bytes.
struct IdxTensor {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

/// Parses an IDX byte stream (magic 0x00000803 for 3-d image tensors,
/// 0x00000801 for 1-d label vectors). Never reads past the declared
/// payload; malformed input raises std::runtime_error.
IdxTensor parse_idx(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> serialize_idx(const IdxTensor& tensor);

/// Reads an IDX file; transparently inflates gzip (1F 8B magic) content.
IdxTensor load_idx_file(const std::string& path);

std::vector<std::uint8_t> gzip_compress(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> gzip_decompress(std::span<const std::uint8_t> bytes);

/// Image/label pairs with pixels stored raw and exposed as reals in [0,1].
/// MNIST sets use the standard 784-pixel width; the container itself is
/// width-generic so toy fixtures can reuse the streaming machinery.
struct MnistSet {
  static constexpr int kImageSize = 784;

  int image_size = kImageSize;
  std::vector<std::uint8_t> raw_pixels;  // size * image_size, row-major
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
  double pixel(std::size_t image, int index) const {
    return raw_pixels[image * static_cast<std::size_t>(image_size) +
                      static_cast<std::size_t>(index)] /
           255.0;
  }

  /// Gathers the given rows into a batch-major double matrix in [0,1].
  Eigen::MatrixXd gather_images(std::span<const std::uint32_t> rows) const;
  std::vector<int> gather_labels(std::span<const std::uint32_t> rows) const;
};

struct SplitSpec {
  int train = 55000;
  int validation = 5000;
  int test = 10000;
  std::uint64_t shuffle_seed = 0;
};

struct Splits {
  MnistSet train;
  MnistSet validation;
  MnistSet test;
};

/// Seeded Fisher-Yates shuffle of the raw training examples, then a
/// train/validation cut; the test set keeps file order. Raw counts must
/// equal train+validation and test exactly.
Splits build_splits(const IdxTensor& train_images, const IdxTensor& train_labels,
                    const IdxTensor& test_images, const IdxTensor& test_labels,
                    const SplitSpec& spec);

struct ImbalanceSpec {
  int n = 0;                      // number of down-weighted classes
  double keep_probability = 0.01;
  std::uint64_t seed = 0;
};

struct ImbalanceResult {
  MnistSet subset;
  std::vector<int> chosen_classes;  // sorted
};

/// Chooses n distinct classes uniformly (seeded) and keeps each of their
/// examples with an independent Bernoulli(keep_probability) draw; all
/// other examples are kept. Example order is preserved.
ImbalanceResult apply_imbalance(const MnistSet& train, const ImbalanceSpec& spec);

struct Batch {
  Eigen::MatrixXd images;
  std::vector<int> labels;
};

/// One epoch of seeded shuffled batches; the final short batch is emitted.
/// A default-constructed stream is empty and yields nothing.
class BatchStream {
 public:
  BatchStream() = default;
  BatchStream(const MnistSet& set, int batch_size, std::uint64_t seed);

  std::optional<Batch> next();
  std::size_t batch_count() const;
  int batch_size() const { return batch_size_; }

 private:
  const MnistSet* set_ = nullptr;
  int batch_size_ = 1;
  std::vector<std::uint32_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace uam::data
