#include "ovl/common.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace ovl {

const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::vocabulary_exhausted: return "vocabulary_exhausted";
    case ErrorKind::io: return "io";
    case ErrorKind::malformed: return "malformed";
    case ErrorKind::context_overflow: return "context_overflow";
    case ErrorKind::out_of_vocab: return "out_of_vocab";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::undefined_ratio: return "undefined_ratio";
    case ErrorKind::flagged_fit: return "flagged_fit";
    case ErrorKind::remote_timeout: return "remote_timeout";
    case ErrorKind::remote_malformed: return "remote_malformed";
    case ErrorKind::remote_retry_exhausted: return "remote_retry_exhausted";
    case ErrorKind::remote_http: return "remote_http";
    case ErrorKind::internal: return "internal";
  }
  return "unknown";
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return std::string(buf);
}

void atomic_write_file(const std::filesystem::path& path,
                       const std::string& contents) {
  namespace fs = std::filesystem;
  fs::path dir = path.parent_path();
  if (!dir.empty()) {
    std::error_code ec;
    fs::create_directories(dir, ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw Error(ErrorKind::io, "cannot open for writing: " + tmp.string());
    out.write(contents.data(), std::streamsize(contents.size()));
    if (!out)
      throw Error(ErrorKind::io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec)
    throw Error(ErrorKind::io,
                "rename failed: " + tmp.string() + " -> " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace ovl
