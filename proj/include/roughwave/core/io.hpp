#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "roughwave/core/grid.hpp"

namespace roughwave::io {

using json = nlohmann::json;

/// Round-trip exact decimal form of a double.
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  if (p.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
  }
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot read " + p.string());
  return is;
}

inline json lattice_json(const Lattice& l) { return json{{"shape", l.shape}, {"lengths", l.lengths}}; }

inline Lattice lattice_from_json(const json& j) {
  return Lattice{j.at("shape").get<std::vector<std::size_t>>(), j.at("lengths").get<std::vector<double>>()};
}

/// JSON descriptor of a grid function (shape, lengths, dtype).
template <class T>
json descriptor(const GridFunction<T>& u) {
  json j = lattice_json(u.lattice);
  j["dtype"] = std::is_same_v<T, cplx> ? "complex" : "real";
  return j;
}

/// CSV layout: comment header with shape and lengths, then one line per row of the last axis.
/// Complex entries occupy two columns (re, im).
template <class T>
void write_csv(std::ostream& os, const GridFunction<T>& u) {
  const Lattice& l = u.lattice;
  os << "# shape:";
  for (std::size_t a = 0; a < l.dim(); ++a) os << (a ? "," : "") << l.shape[a];
  os << "\n# lengths:";
  for (std::size_t a = 0; a < l.dim(); ++a) os << (a ? "," : "") << num(l.lengths[a]);
  os << "\n# dtype:" << (std::is_same_v<T, cplx> ? "complex" : "real") << "\n";
  const std::size_t row = l.shape.empty() ? 1 : l.shape.back();
  for (std::size_t i = 0; i < u.size(); ++i) {
    if constexpr (std::is_same_v<T, cplx>)
      os << num(u[i].real()) << "," << num(u[i].imag());
    else
      os << num(u[i]);
    os << ((i + 1) % row == 0 ? "\n" : ",");
  }
}

template <class T>
void write_csv(const std::filesystem::path& p, const GridFunction<T>& u) {
  auto os = open_out(p);
  write_csv(os, u);
}

namespace detail {
inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}
} // namespace detail

template <class T>
GridFunction<T> read_csv(std::istream& is) {
  Lattice l;
  bool is_complex = false;
  std::vector<double> flat;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto colon = line.find(':');
      if (colon == std::string::npos) continue;
      const std::string key = line.substr(2, colon - 2);
      const std::string val = line.substr(colon + 1);
      if (key == "shape")
        for (const auto& t : detail::split(val, ',')) l.shape.push_back(std::stoul(t));
      else if (key == "lengths")
        for (const auto& t : detail::split(val, ',')) l.lengths.push_back(std::stod(t));
      else if (key == "dtype")
        is_complex = val == "complex";
      continue;
    }
    for (const auto& t : detail::split(line, ',')) flat.push_back(std::stod(t));
  }
  if (l.shape.empty() || l.lengths.size() != l.shape.size()) throw IoError("grid csv: missing shape or lengths header");
  if (is_complex != std::is_same_v<T, cplx>) throw IoError("grid csv: dtype mismatch");
  GridFunction<T> u(l);
  const std::size_t per = is_complex ? 2 : 1;
  if (flat.size() != per * u.size()) throw IoError("grid csv: sample count does not match shape");
  for (std::size_t i = 0; i < u.size(); ++i) {
    if constexpr (std::is_same_v<T, cplx>)
      u[i] = cplx(flat[2 * i], flat[2 * i + 1]);
    else
      u[i] = flat[i];
  }
  return u;
}

template <class T>
GridFunction<T> read_csv(const std::filesystem::path& p) {
  auto is = open_in(p);
  return read_csv<T>(is);
}

inline void write_json(const std::filesystem::path& p, const json& j) {
  auto os = open_out(p);
  os << j.dump(2) << "\n";
}

inline json read_json(const std::filesystem::path& p) {
  auto is = open_in(p);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError("invalid json in " + p.string() + ": " + e.what());
  }
}

} // namespace roughwave::io
