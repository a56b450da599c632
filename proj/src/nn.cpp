#include "pruneq/nn.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace pruneq {

namespace {

constexpr char kMagic[7] = {'P', 'R', 'U', 'N', 'E', 'Q', '1'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Network& net, ModelKind kind) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(static_cast<std::uint8_t>(kind));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(net.layer_count()));
  for (const auto& layer : net.layers()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(layer.input_dim()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(layer.output_dim()));
  }
  for (const auto& layer : net.layers()) {
    for (Index i = 0; i < layer.weight.size(); ++i) put_le<double>(out, layer.weight.data()[i]);
    for (Index i = 0; i < layer.bias.size(); ++i) put_le<double>(out, layer.bias[i]);
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) + 1 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ParseError("not a PRUNEQ1 checkpoint");
  Reader in(bytes.subspan(sizeof(kMagic)));
  Checkpoint ck;
  const auto tag = in.get<std::uint8_t>();
  if (tag > static_cast<std::uint8_t>(ModelKind::kBehavior)) throw ParseError("unknown model kind tag");
  ck.kind = static_cast<ModelKind>(tag);
  const auto count = in.get<std::uint32_t>();
  if (count == 0 || count > 1024) throw ParseError("implausible layer count in checkpoint");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> dims(count);
  for (auto& d : dims) {
    d.first = in.get<std::uint32_t>();
    d.second = in.get<std::uint32_t>();
  }
  std::vector<DenseLayer<double>> layers;
  for (const auto& [rows, cols] : dims) {
    DenseLayer<double> layer{Matrix(rows, cols), RowVector(cols)};
    for (Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = in.get<double>();
    for (Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = in.get<double>();
    layers.push_back(std::move(layer));
  }
  if (!in.done()) throw ParseError("trailing bytes after checkpoint payload");
  ck.network = Network(std::move(layers));
  return ck;
}

void save_checkpoint(const std::string& path, const Network& net, ModelKind kind) {
  const auto bytes = serialize_checkpoint(net, kind);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingPrerequisite("checkpoint not found: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::vector<Index> mlp_dims(Index input_dim, Index hidden_width, int hidden_layers, Index output_dim) {
  std::vector<Index> dims{input_dim};
  for (int k = 0; k < hidden_layers; ++k) dims.push_back(hidden_width);
  dims.push_back(output_dim);
  return dims;
}

}  // namespace pruneq
