#include "protosim/io.hpp"

#include "protosim/common.hpp"

#include <atomic>
#include <fstream>
#include <sstream>

#include <unistd.h>

namespace protosim {

namespace fs = std::filesystem;

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error("read failure on '" + path.string() + "'");
  return bytes;
}

std::string read_file_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  static std::atomic<unsigned> counter{0};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw Error("write failure on '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("cannot move '" + tmp.string() + "' to '" + path.string() + "'");
  }
}

void write_file_atomic(const fs::path& path, const std::vector<std::uint8_t>& contents) {
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(contents.data()), contents.size()));
}

std::string file_hash(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  Fnv1a h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

}  // namespace protosim
