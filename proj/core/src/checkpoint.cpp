#include "idd/checkpoint.hpp"

#include <array>
#include <fstream>

namespace idd {

namespace {
constexpr std::array<char, 4> kMagic = {'I', 'D', 'D', 'C'};
}

const std::vector<float>& Checkpoint::block(const std::string& name) const {
  auto it = blocks.find(name);
  if (it == blocks.end()) throw FormatError("checkpoint has no block '" + name + "'");
  return it->second;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    io::Writer w(os);
    w.bytes(kMagic.data(), kMagic.size());
    w.u32(kCheckpointFormatVersion);
    w.str(ckpt.header.dump());
    w.u64(ckpt.blocks.size());
    for (const auto& [name, values] : ckpt.blocks) {
      w.str(name);
      w.u64(values.size());
      w.f32_array(values);
    }
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  io::Reader r(is, path.string());
  std::array<char, 4> magic{};
  if (!r.try_bytes(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError(path.string() + ": not an IDDC checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointFormatVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": corrupt header: " + e.what());
  }
  const std::uint64_t count = r.u64();
  if (count > 4096) throw FormatError(path.string() + ": implausible block count");
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str(4096);
    const std::uint64_t n = r.u64();
    if (n > (std::uint64_t{1} << 32)) throw FormatError(path.string() + ": implausible block size");
    ckpt.blocks.emplace(std::move(name), r.f32_array(n));
  }
  return ckpt;
}

}  // namespace idd
