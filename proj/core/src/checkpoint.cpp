#include "binaformer/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "binaformer/errors.hpp"

namespace binaformer {

namespace {

constexpr char kMagic[4] = {'B', 'F', 'C', 'K'};

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw IoError(path + ": truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, const std::string& path) {
  const auto len = get<std::uint32_t>(is, path);
  std::string s(len, '\0');
  if (len && !is.read(s.data(), len)) throw IoError(path + ": truncated checkpoint");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& config, std::uint64_t seed, std::size_t clusters,
                     const ParameterList& params, const std::optional<KMeansModel>& centroids) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(path + ": cannot open for writing");
  auto meta = nlohmann::json::parse(to_json(config));
  meta["seed"] = seed;
  meta["clusters"] = clusters;
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put_string(os, meta.dump());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_string(os, p.name);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put<std::uint64_t>(os, d);
    for (double v : p.tensor.data()) put<float>(os, static_cast<float>(v));
  }
  put<std::uint32_t>(os, centroids ? 1U : 0U);
  if (centroids) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(centroids->k));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(centroids->dim));
    for (double v : centroids->centroids) put<float>(os, static_cast<float>(v));
  }
  if (!os) throw IoError(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path + ": checkpoint not found");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path + ": not a checkpoint");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) throw IoError(path + ": unsupported version " + std::to_string(version));

  Checkpoint ck;
  auto meta = nlohmann::json::parse(get_string(is, path), nullptr, false);
  if (meta.is_discarded() || !meta.is_object()) throw IoError(path + ": corrupt config block");
  ck.seed = meta.value("seed", std::uint64_t{0});
  ck.clusters = meta.value("clusters", std::size_t{0});
  meta.erase("seed");
  meta.erase("clusters");
  ck.config = parse_run_config(meta.dump());

  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredArray a;
    a.name = get_string(is, path);
    const auto rank = get<std::uint32_t>(is, path);
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(is, path)));
    const auto n = shape_numel(a.shape);
    a.values.resize(n);
    for (auto& v : a.values) v = get<float>(is, path);
    ck.arrays.push_back(std::move(a));
  }
  if (get<std::uint32_t>(is, path) == 1) {
    KMeansModel km;
    km.k = get<std::uint32_t>(is, path);
    km.dim = get<std::uint32_t>(is, path);
    km.centroids.resize(km.k * km.dim);
    for (auto& v : km.centroids) v = get<float>(is, path);
    ck.centroids = std::move(km);
  }
  return ck;
}

void restore_parameters(const Checkpoint& checkpoint, const ParameterList& params) {
  for (const auto& p : params) {
    const auto it = std::find_if(checkpoint.arrays.begin(), checkpoint.arrays.end(),
                                 [&](const StoredArray& a) { return a.name == p.name; });
    if (it == checkpoint.arrays.end()) throw IoError("checkpoint has no array named " + p.name);
    if (it->shape != p.tensor.shape()) {
      throw DimensionError("checkpoint array " + p.name + " has shape " + shape_string(it->shape) + ", model expects " +
                           shape_string(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(it->values[i]);
  }
}

void write_loss_csv(const std::string& path, const std::vector<double>& losses) {
  std::ofstream os(path);
  if (!os) throw IoError(path + ": cannot open for writing");
  for (std::size_t i = 0; i < losses.size(); ++i) {
    os << i << ',' << std::setprecision(17) << losses[i] << '\n';
  }
  if (!os) throw IoError(path + ": write failed");
}

}  // namespace binaformer
