#include "resdense/checkpoint.hpp"

#include <fstream>

#include "resdense/config.hpp"
#include "resdense/ctf.hpp"

namespace resdense {

namespace {

constexpr char kMagic[4] = {'R', 'D', 'N', 'C'};
// Names and config text are short; anything larger is a corrupt file.
constexpr std::uint32_t kMaxStringBytes = 1u << 20;

void write_string(std::ostream& out, const std::string& s) {
  binary::write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, const char* what) {
  const std::uint32_t n = binary::read_u32(in);
  if (n > kMaxStringBytes) throw IoError(std::string("checkpoint: implausible ") + what + " length");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw IoError(std::string("checkpoint: truncated ") + what);
  return s;
}

}  // namespace

void write_checkpoint(std::ostream& out, const ResDenseModel<float>& model) {
  out.write(kMagic, sizeof kMagic);
  binary::write_u32(out, kCheckpointVersion);
  const auto entries = model.parameters().entries();
  binary::write_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    write_string(out, e.name);
    write_ctf(out, e.tensor);
  }
  write_string(out, model_config_to_json(model.config()));
  if (!out) throw IoError("checkpoint: write failed");
}

void save_checkpoint(const std::filesystem::path& path, const ResDenseModel<float>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, model);
}

ResDenseModel<float> read_checkpoint(std::istream& in, const ModelConfig* skeleton) {
  char magic[4];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + 4, kMagic)) {
    throw IoError("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = binary::read_u32(in);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = binary::read_u32(in);
  std::vector<std::pair<std::string, Tensor<float>>> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = read_string(in, "tensor name");
    records.emplace_back(std::move(name), read_ctf<float>(in));
  }
  const ModelConfig stored = parse_model_config(read_string(in, "model config"));
  ResDenseModel<float> model(skeleton != nullptr ? *skeleton : stored);

  auto entries = model.parameters().entries();
  for (std::size_t i = 0; i < std::max<std::size_t>(entries.size(), records.size()); ++i) {
    if (i >= records.size()) throw ShapeError("checkpoint is missing tensor '" + entries[i].name + "'");
    if (i >= entries.size()) throw ShapeError("checkpoint has unexpected tensor '" + records[i].first + "'");
    const auto& [name, tensor] = records[i];
    if (name != entries[i].name) {
      throw ShapeError("checkpoint tensor '" + name + "' found where '" + entries[i].name + "' was expected");
    }
    if (tensor.shape() != entries[i].tensor.shape()) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_to_string(tensor.shape()) +
                       ", expected " + shape_to_string(entries[i].tensor.shape()));
    }
    const auto src = tensor.data();
    auto dst = entries[i].tensor.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return model;
}

ResDenseModel<float> load_checkpoint(const std::filesystem::path& path, const ModelConfig* skeleton) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(in, skeleton);
}

}  // namespace resdense
