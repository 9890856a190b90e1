#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "forge/deformation.hpp"
#include "forge/error.hpp"
#include "forge/parameters.hpp"

namespace forge {

using Json = nlohmann::json;

inline constexpr const char* kMapFormat = "forge-map";
inline constexpr int kMapVersion = 1;

// ---------------------------------------------------------------------------
// Integer matrices as text
// ---------------------------------------------------------------------------

/// Whitespace-separated, row-major. Rows end at newlines or ';'. Must be square.
inline IMat parse_matrix_text(const std::string& text) {
  std::vector<std::vector<long long>> rows;
  std::string normalized = text;
  for (char& c : normalized)
    if (c == ';') c = '\n';
  std::istringstream lines(normalized);
  std::string line;
  while (std::getline(lines, line)) {
    std::istringstream is(line);
    std::vector<long long> row;
    std::string tok;
    while (is >> tok) {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size()) throw Error(Errc::InvalidConfig, "matrix entry '" + tok + "' is not an integer");
      row.push_back(v);
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error(Errc::InvalidConfig, "empty matrix");
  const auto d = rows.size();
  IMat m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) {
    if (rows[i].size() != d) throw Error(Errc::InvalidConfig, "matrix is not square");
    for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

inline std::string format_matrix_text(const IMat& m) {
  std::ostringstream os;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? " " : "") << m(i, j);
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Eigen <-> JSON
// ---------------------------------------------------------------------------

inline Json to_json(const Vec& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Json to_json(const Mat& m) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json r = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    a.push_back(std::move(r));
  }
  return a;
}

inline Json to_json(const IMat& m) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json r = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    a.push_back(std::move(r));
  }
  return a;
}

namespace detail {

[[noreturn]] inline void bad(const std::string& what) { throw Error(Errc::InvalidConfig, what); }

inline const Json& field(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) bad(std::string("missing field '") + key + "'");
  return j.at(key);
}

inline double number(const Json& j, const std::string& what) {
  if (!j.is_number()) bad(what + " must be a number");
  return j.get<double>();
}

}  // namespace detail

inline Vec vec_from_json(const Json& j, int dim = -1) {
  if (!j.is_array()) detail::bad("vector must be an array");
  if (dim >= 0 && static_cast<int>(j.size()) != dim) detail::bad("vector has wrong length");
  if (j.size() > 4) detail::bad("vector longer than 4");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = detail::number(j[i], "vector entry");
  return v;
}

inline Mat mat_from_json(const Json& j) {
  if (!j.is_array() || j.empty() || j.size() > 4) detail::bad("matrix must be a non-empty array of rows");
  const std::size_t rows = j.size(), cols = j[0].size();
  Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    if (!j[i].is_array() || j[i].size() != cols) detail::bad("matrix rows differ in length");
    for (std::size_t k = 0; k < cols; ++k)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = detail::number(j[i][k], "matrix entry");
  }
  return m;
}

/// Accepts a JSON array of integer rows or a whitespace text string.
inline IMat imat_from_json(const Json& j) {
  if (j.is_string()) return parse_matrix_text(j.get<std::string>());
  if (!j.is_array() || j.empty()) detail::bad("integer matrix must be an array of rows or a text string");
  const std::size_t d = j.size();
  if (d > 4) detail::bad("matrix larger than 4x4");
  IMat m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) {
    if (!j[i].is_array() || j[i].size() != d) detail::bad("matrix is not square");
    for (std::size_t k = 0; k < d; ++k) {
      if (!j[i][k].is_number_integer()) detail::bad("matrix entries must be integers");
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = j[i][k].get<long long>();
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Map descriptor
// ---------------------------------------------------------------------------

inline Json stage_to_json(const ChartStage& s) {
  return Json{{"field",
               {{"kind", field_kind_name(s.field.kind)},
                {"rate", s.field.rate},
                {"scale", s.field.scale},
                {"k1", s.field.k1},
                {"k2", s.field.k2}}},
              {"offset", to_json(s.offset)},
              {"plane", {{"inner", s.plane.inner}, {"outer", s.plane.outer}}},
              {"transverse", {{"inner", s.transverse.inner}, {"outer", s.transverse.outer}}},
              {"time", s.time},
              {"steps", s.steps}};
}

inline ChartStage stage_from_json(const Json& j, int dim) {
  using detail::field;
  using detail::number;
  ChartStage s;
  const Json& f = field(j, "field");
  s.field.kind = field_kind_from(field(f, "kind").get<std::string>());
  s.field.rate = number(field(f, "rate"), "rate");
  s.field.scale = number(field(f, "scale"), "scale");
  s.field.k1 = number(field(f, "k1"), "k1");
  s.field.k2 = number(field(f, "k2"), "k2");
  s.offset = vec_from_json(field(j, "offset"), dim);
  s.plane.inner = number(field(field(j, "plane"), "inner"), "plane.inner");
  s.plane.outer = number(field(field(j, "plane"), "outer"), "plane.outer");
  s.transverse.inner = number(field(field(j, "transverse"), "inner"), "transverse.inner");
  s.transverse.outer = number(field(field(j, "transverse"), "outer"), "transverse.outer");
  s.time = number(field(j, "time"), "time");
  const Json& st = field(j, "steps");
  if (!st.is_number_integer() || st.get<int>() < 1) detail::bad("steps must be a positive integer");
  s.steps = st.get<int>();
  return s;
}

inline Json group_to_json(const StageGroup& g) {
  Json stages = Json::array();
  for (const auto& s : g.stages) stages.push_back(stage_to_json(s));
  return Json{{"label", g.label},
              {"center", to_json(g.center)},
              {"frame", to_json(g.frame)},
              {"frameInv", to_json(g.frameInv)},
              {"scaling", to_json(g.scaling)},
              {"stages", std::move(stages)}};
}

inline StageGroup group_from_json(const Json& j, int dim) {
  using detail::field;
  StageGroup g;
  g.label = field(j, "label").get<std::string>();
  g.center = vec_from_json(field(j, "center"), dim);
  g.frame = mat_from_json(field(j, "frame"));
  g.frameInv = mat_from_json(field(j, "frameInv"));
  if (g.frame.rows() != dim || g.frame.cols() != dim || g.frameInv.rows() != dim || g.frameInv.cols() != dim)
    detail::bad("group frame has wrong shape");
  g.scaling = vec_from_json(field(j, "scaling"), dim);
  for (const auto& s : field(j, "stages")) g.stages.push_back(stage_from_json(s, dim));
  return g;
}

inline Json ledger_to_json(const ParameterLedger& L) {
  Json c = Json::array();
  for (const auto& k : L.constraints) c.push_back({{"name", k.name}, {"slack", k.slack}});
  return Json{{"d", L.d},         {"N", L.N},
              {"eps", L.eps},     {"alpha", L.alpha},
              {"gamma", L.gamma}, {"Lambda", L.Lambda},
              {"etaSpectral", L.etaSpectral}, {"etaMass", L.etaMass},
              {"rho", L.rho},     {"tau1", L.tau1},
              {"tau2", L.tau2},   {"K", L.K},
              {"K0", L.K0},       {"eps0", L.eps0},
              {"R0", L.R0},       {"r0", L.r0},
              {"h0", L.h0},       {"h1", L.h1},
              {"htop", L.htop},   {"lambdaU", L.lambdaU},
              {"muS", L.muS},     {"K0Source", L.K0Source},
              {"constraints", std::move(c)}};
}

inline ParameterLedger ledger_from_json(const Json& j) {
  using detail::field;
  using detail::number;
  ParameterLedger L;
  L.d = field(j, "d").get<int>();
  L.N = field(j, "N").get<int>();
  auto num = [&](const char* k) { return number(field(j, k), k); };
  L.eps = num("eps");
  L.alpha = num("alpha");
  L.gamma = num("gamma");
  L.Lambda = num("Lambda");
  L.etaSpectral = num("etaSpectral");
  L.etaMass = num("etaMass");
  L.rho = num("rho");
  L.tau1 = num("tau1");
  L.tau2 = num("tau2");
  L.K = num("K");
  L.K0 = num("K0");
  L.eps0 = num("eps0");
  L.R0 = num("R0");
  L.r0 = num("r0");
  L.h0 = num("h0");
  L.h1 = num("h1");
  L.htop = num("htop");
  L.lambdaU = num("lambdaU");
  L.muS = num("muS");
  L.K0Source = field(j, "K0Source").get<std::string>();
  for (const auto& c : field(j, "constraints"))
    L.constraints.push_back({field(c, "name").get<std::string>(), number(field(c, "slack"), "slack")});
  return L;
}

/// Versioned descriptor. Doubles are written in shortest round-trip form, so a reload reproduces
/// every coefficient bit for bit.
inline Json map_to_json(const DeformedMap& g, const ParameterLedger* ledger = nullptr) {
  Json post = Json::array(), pre = Json::array();
  for (const auto& gr : g.post()) post.push_back(group_to_json(gr));
  for (const auto& gr : g.pre()) pre.push_back(group_to_json(gr));
  Json j{{"format", kMapFormat},
         {"version", kMapVersion},
         {"dim", g.dim()},
         {"base", to_json(g.base().matrix())},
         {"shift", to_json(g.shift())},
         {"post", std::move(post)},
         {"pre", std::move(pre)}};
  if (ledger) j["ledger"] = ledger_to_json(*ledger);
  return j;
}

struct MapDocument {
  DeformedMap map;
  std::optional<ParameterLedger> ledger;
};

inline MapDocument map_from_json(const Json& j) {
  using detail::field;
  if (!j.is_object() || !j.contains("format") || j.at("format") != kMapFormat)
    detail::bad("not a map descriptor");
  const int version = field(j, "version").get<int>();
  if (version != kMapVersion) detail::bad("unsupported map descriptor version " + std::to_string(version));
  const int dim = field(j, "dim").get<int>();
  MapDocument doc;
  doc.map = DeformedMap(ToralAutomorphism(imat_from_json(field(j, "base"))));
  if (doc.map.dim() != dim) detail::bad("base matrix does not match dim");
  doc.map.set_shift(vec_from_json(field(j, "shift"), dim));
  for (const auto& gr : field(j, "post")) doc.map.add_post(group_from_json(gr, dim));
  for (const auto& gr : field(j, "pre")) doc.map.add_pre(group_from_json(gr, dim));
  if (j.contains("ledger")) doc.ledger = ledger_from_json(j.at("ledger"));
  return doc;
}

// ---------------------------------------------------------------------------
// Files and hashes
// ---------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::IoError, "cannot open " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error(Errc::IoError, "write failed for " + path);
}

inline Json parse_json(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw Error(Errc::InvalidConfig, origin + ": " + e.what());
  }
}

/// Lower-case hex SHA-256.
inline std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error(Errc::IoError, "SHA-256 failed");
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

inline std::string file_sha256(const std::string& path) { return sha256_hex(read_file(path)); }

/// Canonical text of a descriptor (two-space indent, trailing newline).
inline std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

inline void save_map(const std::string& path, const DeformedMap& g, const ParameterLedger* ledger = nullptr) {
  write_file(path, dump_json(map_to_json(g, ledger)));
}

inline MapDocument load_map(const std::string& path) { return map_from_json(parse_json(read_file(path), path)); }

}  // namespace forge
