#include "ttc/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "ttc/errors.hpp"
#include "ttc/glob.hpp"

namespace ttc {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'T', 'T', 'C', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError(std::string("checkpoint: truncated ") + what);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError(std::string("checkpoint: truncated ") + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string get_string(std::istream& is, const char* what) {
  std::uint32_t len = get_u32(is, what);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError(std::string("checkpoint: truncated ") + what);
  return s;
}

}  // namespace

void save_tensors(const fs::path& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors,
                  const CheckpointMeta& meta) {
  for (const auto& [name, t] : tensors)
    if (!t.all_finite())
      throw NumericError("checkpoint: non-finite values in '" + name + "'");
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      put_string(os, name);
      put_u32(os, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t i = 0; i < t.rank(); ++i)
        put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
      for (double v : t.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        put_u64(os, bits);
      }
    }
    put_u64(os, meta.seed);
    put_string(os, meta.config_snapshot);
    put_string(os, meta.stage);
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path.string());
  const std::uint32_t version = get_u32(is, "version");
  if (version != kVersion)
    throw IoError("checkpoint: unsupported version " +
                  std::to_string(version));
  const std::uint32_t count = get_u32(is, "entry count");
  LoadedCheckpoint out;
  out.tensors.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    std::string name = get_string(is, "entry name");
    const std::uint32_t rank = get_u32(is, "rank");
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i)
      shape[i] = get_u32(is, "dims");
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) {
      std::uint64_t bits = get_u64(is, "payload");
      std::memcpy(&v, &bits, sizeof(v));
    }
    out.tensors.emplace_back(std::move(name),
                             Tensor::from_data(std::move(shape),
                                               std::move(data)));
  }
  out.meta.seed = get_u64(is, "seed");
  out.meta.config_snapshot = get_string(is, "config snapshot");
  out.meta.stage = get_string(is, "stage tag");
  return out;
}

const Tensor* LoadedCheckpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void save_model(const fs::path& path, const TransformerModel& model,
                const CheckpointMeta& meta) {
  save_tensors(path, model.named_parameters(), meta);
}

void load_into_model(TransformerModel& model, const LoadedCheckpoint& ckpt,
                     bool reset_head) {
  auto is_head = [](const std::string& name) {
    return glob_match("head.*", name);
  };
  std::size_t matched = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (reset_head && is_head(name)) continue;
    if (!model.has_param(name))
      throw ConfigError("checkpoint entry '" + name +
                        "' has no matching model parameter");
    Tensor& dst = model.param(name);
    if (dst.shape() != t.shape())
      throw ConfigError("checkpoint entry '" + name + "' has shape " +
                        shape_str(t.shape()) + " but model expects " +
                        shape_str(dst.shape()));
    std::copy(t.data().begin(), t.data().end(),
              dst.mutable_data().begin());
    ++matched;
  }
  for (const auto& name : model.parameter_names()) {
    if (reset_head && is_head(name)) continue;
    if (!ckpt.find(name))
      throw ConfigError("model parameter '" + name +
                        "' missing from checkpoint");
  }
  (void)matched;
}

}  // namespace ttc
