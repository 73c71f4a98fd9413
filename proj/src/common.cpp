#include "mpae/common.hpp"

#include <cstdio>
#include <fstream>

#include "mpae/detail/io.hpp"

namespace mpae::detail {

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

}  // namespace mpae::detail

namespace mpae {

namespace {

double parse_epsilon(const std::string& text) {
  auto slash = text.find('/');
  try {
    if (slash != std::string::npos) {
      double num = std::stod(text.substr(0, slash));
      double den = std::stod(text.substr(slash + 1));
      if (den == 0.0) throw ConfigError("representation: zero denominator in epsilon");
      return num / den;
    }
    return std::stod(text);
  } catch (const std::logic_error&) {
    throw ConfigError("representation: cannot parse epsilon '" + text + "'");
  }
}

}  // namespace

RepSpec RepSpec::parse(const std::string& text) {
  if (text == "sdf") return sdf();
  if (text == "sharp") return sharp();
  if (text.rfind("tanh:", 0) == 0) {
    double eps = parse_epsilon(text.substr(5));
    if (!(eps > 0.0)) throw ConfigError("representation: tanh epsilon must be positive");
    return tanh(eps);
  }
  throw ConfigError("representation: unknown tag '" + text +
                    "' (expected sdf, sharp, or tanh:<eps>)");
}

std::string RepSpec::label() const {
  switch (kind) {
    case ReprKind::Sdf:
      return "sdf";
    case ReprKind::Sharp:
      return "sharp";
    case ReprKind::Tanh:
      return "tanh:" + format_double(epsilon, 12);
  }
  throw ConfigError("representation: invalid kind");
}

std::string RepSpec::file_label() const {
  std::string s = label();
  for (auto& c : s)
    if (c == ':' || c == '/') c = '_';
  return s;
}

std::string format_double(double v, int significant) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", significant, v);
  return buf;
}

}  // namespace mpae
