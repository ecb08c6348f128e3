#include "uam/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <stdexcept>

#include "uam/rng.hpp"

namespace uam::data {

namespace {

constexpr std::uint8_t kTypeUnsignedByte = 0x08;
constexpr std::uint64_t kMaxElements = 1ull << 32;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t at) {
  return (static_cast<std::uint32_t>(bytes[at]) << 24) |
         (static_cast<std::uint32_t>(bytes[at + 1]) << 16) |
         (static_cast<std::uint32_t>(bytes[at + 2]) << 8) |
         static_cast<std::uint32_t>(bytes[at + 3]);
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace

IdxTensor parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw std::runtime_error("idx: truncated header");
  if (bytes[0] != 0 || bytes[1] != 0 || bytes[2] != kTypeUnsignedByte) {
    throw std::runtime_error("idx: bad magic");
  }
  const int ndims = bytes[3];
  if (ndims != 1 && ndims != 3) {
    throw std::runtime_error("idx: unsupported dimension count");
  }
  const std::size_t header = 4 + 4 * static_cast<std::size_t>(ndims);
  if (bytes.size() < header) throw std::runtime_error("idx: truncated header");

  IdxTensor t;
  std::uint64_t elements = 1;
  for (int d = 0; d < ndims; ++d) {
    const std::uint32_t size = read_be32(bytes, 4 + 4 * static_cast<std::size_t>(d));
    t.dims.push_back(size);
    elements *= size;
    if (elements > kMaxElements) {
      throw std::runtime_error("idx: dimension overflow");
    }
  }
  if (bytes.size() - header < elements) {
    throw std::runtime_error("idx: truncated payload");
  }
  if (bytes.size() - header > elements) {
    throw std::runtime_error("idx: payload size mismatch");
  }
  t.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                   bytes.end());
  return t;
}

std::vector<std::uint8_t> serialize_idx(const IdxTensor& tensor) {
  if (tensor.dims.size() != 1 && tensor.dims.size() != 3) {
    throw std::invalid_argument("idx: unsupported dimension count");
  }
  std::vector<std::uint8_t> out;
  out.reserve(4 + 4 * tensor.dims.size() + tensor.payload.size());
  out.push_back(0);
  out.push_back(0);
  out.push_back(kTypeUnsignedByte);
  out.push_back(static_cast<std::uint8_t>(tensor.dims.size()));
  std::uint64_t elements = 1;
  for (std::uint32_t d : tensor.dims) {
    write_be32(out, d);
    elements *= d;
  }
  if (elements != tensor.payload.size()) {
    throw std::invalid_argument("idx: payload does not match dims");
  }
  out.insert(out.end(), tensor.payload.begin(), tensor.payload.end());
  return out;
}

std::vector<std::uint8_t> gzip_decompress(std::span<const std::uint8_t> bytes) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) {
    throw std::runtime_error("gzip: inflateInit failed");
  }
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> chunk(1 << 16);
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw std::runtime_error("gzip: corrupt stream");
    }
    out.insert(out.end(), chunk.begin(),
               chunk.begin() + static_cast<std::ptrdiff_t>(chunk.size() - zs.avail_out));
  }
  inflateEnd(&zs);
  return out;
}

std::vector<std::uint8_t> gzip_compress(std::span<const std::uint8_t> bytes) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS, 8,
                   Z_DEFAULT_STRATEGY) != Z_OK) {
    throw std::runtime_error("gzip: deflateInit failed");
  }
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> chunk(1 << 16);
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  int rc = Z_OK;
  do {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = deflate(&zs, Z_FINISH);
    out.insert(out.end(), chunk.begin(),
               chunk.begin() + static_cast<std::ptrdiff_t>(chunk.size() - zs.avail_out));
  } while (rc == Z_OK);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw std::runtime_error("gzip: deflate failed");
  return out;
}

IdxTensor load_idx_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) {
    bytes = gzip_decompress(bytes);
  }
  return parse_idx(bytes);
}

Eigen::MatrixXd MnistSet::gather_images(
    std::span<const std::uint32_t> rows) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), image_size);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t base =
        static_cast<std::size_t>(rows[r]) * static_cast<std::size_t>(image_size);
    for (int j = 0; j < image_size; ++j) {
      out(static_cast<Eigen::Index>(r), j) =
          raw_pixels[base + static_cast<std::size_t>(j)] / 255.0;
    }
  }
  return out;
}

std::vector<int> MnistSet::gather_labels(
    std::span<const std::uint32_t> rows) const {
  std::vector<int> out(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) out[r] = labels[rows[r]];
  return out;
}

namespace {

MnistSet set_from_raw(const IdxTensor& images, const IdxTensor& labels,
                      std::span<const std::uint32_t> rows) {
  MnistSet s;
  s.raw_pixels.resize(rows.size() * MnistSet::kImageSize);
  s.labels.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t src = static_cast<std::size_t>(rows[r]) * MnistSet::kImageSize;
    std::copy_n(images.payload.begin() + static_cast<std::ptrdiff_t>(src),
                MnistSet::kImageSize,
                s.raw_pixels.begin() +
                    static_cast<std::ptrdiff_t>(r * MnistSet::kImageSize));
    s.labels[r] = labels.payload[rows[r]];
  }
  return s;
}

void check_pair(const IdxTensor& images, const IdxTensor& labels,
                std::size_t expected, const char* which) {
  if (images.dims.size() != 3 || images.dims[1] != 28 || images.dims[2] != 28) {
    throw std::runtime_error(std::string(which) + ": not a 28x28 image tensor");
  }
  if (labels.dims.size() != 1 || labels.dims[0] != images.dims[0]) {
    throw std::runtime_error(std::string(which) + ": image/label count mismatch");
  }
  if (images.dims[0] != expected) {
    throw std::runtime_error(std::string(which) + ": wrong raw example count");
  }
  for (std::uint8_t l : labels.payload) {
    if (l > 9) throw std::runtime_error(std::string(which) + ": label out of range");
  }
}

}  // namespace

Splits build_splits(const IdxTensor& train_images, const IdxTensor& train_labels,
                    const IdxTensor& test_images, const IdxTensor& test_labels,
                    const SplitSpec& spec) {
  const std::size_t raw_train =
      static_cast<std::size_t>(spec.train) + static_cast<std::size_t>(spec.validation);
  check_pair(train_images, train_labels, raw_train, "train");
  check_pair(test_images, test_labels, static_cast<std::size_t>(spec.test), "test");

  std::vector<std::uint32_t> order(raw_train);
  for (std::uint32_t i = 0; i < raw_train; ++i) order[i] = i;
  Rng rng(spec.shuffle_seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }

  Splits out;
  out.train = set_from_raw(
      train_images, train_labels,
      std::span<const std::uint32_t>(order.data(), static_cast<std::size_t>(spec.train)));
  out.validation = set_from_raw(
      train_images, train_labels,
      std::span<const std::uint32_t>(order.data() + spec.train,
                                     static_cast<std::size_t>(spec.validation)));
  std::vector<std::uint32_t> test_order(static_cast<std::size_t>(spec.test));
  for (std::uint32_t i = 0; i < test_order.size(); ++i) test_order[i] = i;
  out.test = set_from_raw(test_images, test_labels, test_order);
  return out;
}

ImbalanceResult apply_imbalance(const MnistSet& train, const ImbalanceSpec& spec) {
  if (spec.n < 0 || spec.n > 9) {
    throw std::invalid_argument("imbalance: n must be in [0, 9]");
  }
  if (!(spec.keep_probability > 0.0) || spec.keep_probability > 1.0) {
    throw std::invalid_argument("imbalance: keep probability must be in (0, 1]");
  }

  Rng rng(spec.seed);
  std::array<int, 10> pool;
  for (int c = 0; c < 10; ++c) pool[static_cast<std::size_t>(c)] = c;
  for (int i = 0; i < spec.n; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(10 - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  std::vector<int> chosen(pool.begin(), pool.begin() + spec.n);
  std::sort(chosen.begin(), chosen.end());

  std::array<bool, 10> is_chosen{};
  for (int c : chosen) is_chosen[static_cast<std::size_t>(c)] = true;

  std::vector<std::uint32_t> kept;
  kept.reserve(train.size());
  for (std::uint32_t i = 0; i < train.size(); ++i) {
    if (is_chosen[train.labels[i]]) {
      if (rng.uniform01() < spec.keep_probability) kept.push_back(i);
    } else {
      kept.push_back(i);
    }
  }

  const auto stride = static_cast<std::size_t>(train.image_size);
  ImbalanceResult out;
  out.chosen_classes = std::move(chosen);
  out.subset.image_size = train.image_size;
  out.subset.raw_pixels.resize(kept.size() * stride);
  out.subset.labels.resize(kept.size());
  for (std::size_t r = 0; r < kept.size(); ++r) {
    std::copy_n(train.raw_pixels.begin() +
                    static_cast<std::ptrdiff_t>(static_cast<std::size_t>(kept[r]) *
                                                stride),
                static_cast<std::ptrdiff_t>(stride),
                out.subset.raw_pixels.begin() +
                    static_cast<std::ptrdiff_t>(r * stride));
    out.subset.labels[r] = train.labels[kept[r]];
  }
  return out;
}

BatchStream::BatchStream(const MnistSet& set, int batch_size, std::uint64_t seed)
    : set_(&set), batch_size_(batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (set.size() == 0) throw std::invalid_argument("empty dataset");
  order_.resize(set.size());
  for (std::uint32_t i = 0; i < set.size(); ++i) order_[i] = i;
  Rng rng(seed);
  for (std::size_t i = order_.size(); i > 1; --i) {
    std::swap(order_[i - 1], order_[rng.below(i)]);
  }
}

std::size_t BatchStream::batch_count() const {
  return (order_.size() + static_cast<std::size_t>(batch_size_) - 1) /
         static_cast<std::size_t>(batch_size_);
}

std::optional<Batch> BatchStream::next() {
  if (set_ == nullptr || cursor_ >= order_.size()) return std::nullopt;
  const std::size_t take =
      std::min(static_cast<std::size_t>(batch_size_), order_.size() - cursor_);
  const std::span<const std::uint32_t> rows(order_.data() + cursor_, take);
  cursor_ += take;
  Batch b;
  b.images = set_->gather_images(rows);
  b.labels = set_->gather_labels(rows);
  return b;
}

}  // namespace uam::data
