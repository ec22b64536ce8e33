#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cnnscope/error.hpp"
#include "cnnscope/polydata.hpp"

namespace cnnscope {

enum class VtpMode { ascii, binary };

/// `{view}_{layer}_{step:08}.{ext}`, e.g. weight_grid_0_00001080.vtp
inline std::string series_filename(std::string_view view, std::size_t layer, std::int64_t step,
                                   std::string_view ext) {
  char num[32];
  std::snprintf(num, sizeof num, "%08lld", static_cast<long long>(step));
  return std::string(view) + "_" + std::to_string(layer) + "_" + num + "." + std::string(ext);
}

namespace detail {

// Shortest decimal form that round-trips the float (at most 9 significant digits).
inline void append_float(std::string& out, float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

inline void append_int(std::string& out, std::int64_t v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

class FileSink {
 public:
  explicit FileSink(const std::filesystem::path& path) : path_(path), os_(path, std::ios::binary) {
    if (!os_) throw IoError("cannot open for writing", path.string());
  }
  void write(std::string_view s) {
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    bytes_ += s.size();
  }
  void write_raw(const void* p, std::size_t n) {
    os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    bytes_ += n;
  }
  std::size_t finish() {
    os_.flush();
    if (!os_) throw IoError("write failed", path_.string());
    return bytes_;
  }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
  std::size_t bytes_ = 0;
};

template <typename T>
void append_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T read_le(const char* p) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace detail

/// CSV with header `x,y,z,<scalar names...>`, one row per point, LF endings.
/// Returns the number of bytes written.
inline std::size_t write_csv(const PolyData& pd, const std::filesystem::path& path) {
  pd.validate();
  detail::FileSink sink(path);
  std::string buf = "x,y,z";
  for (const auto& s : pd.scalars) buf += "," + s.name;
  buf += '\n';
  for (std::size_t i = 0; i < pd.points.size(); ++i) {
    detail::append_float(buf, pd.points[i][0]);
    buf += ',';
    detail::append_float(buf, pd.points[i][1]);
    buf += ',';
    detail::append_float(buf, pd.points[i][2]);
    for (const auto& s : pd.scalars) {
      buf += ',';
      detail::append_float(buf, s.values[i]);
    }
    buf += '\n';
    if (buf.size() > (1u << 20)) {
      sink.write(buf);
      buf.clear();
    }
  }
  sink.write(buf);
  return sink.finish();
}

namespace detail {

struct ArrayBlock {
  std::string type;  // Float32 | Int64
  std::string name;
  int components = 1;
  std::string bytes;  // little-endian payload
};

inline ArrayBlock float_block(std::string name, const std::vector<float>& v) {
  ArrayBlock b{"Float32", std::move(name), 1, {}};
  b.bytes.reserve(v.size() * 4);
  for (float x : v) append_le(b.bytes, x);
  return b;
}

inline ArrayBlock points_block(const PolyData& pd) {
  ArrayBlock b{"Float32", "Points", 3, {}};
  b.bytes.reserve(pd.points.size() * 12);
  for (const auto& p : pd.points)
    for (float x : p) append_le(b.bytes, x);
  return b;
}

inline ArrayBlock int_block(std::string name, const std::vector<std::int64_t>& v) {
  ArrayBlock b{"Int64", std::move(name), 1, {}};
  b.bytes.reserve(v.size() * 8);
  for (auto x : v) append_le(b.bytes, x);
  return b;
}

inline void ascii_values(std::string& out, const ArrayBlock& b) {
  if (b.type == "Float32") {
    for (std::size_t i = 0; i < b.bytes.size(); i += 4) {
      if (i) out += ' ';
      append_float(out, read_le<float>(b.bytes.data() + i));
    }
  } else {
    for (std::size_t i = 0; i < b.bytes.size(); i += 8) {
      if (i) out += ' ';
      append_int(out, read_le<std::int64_t>(b.bytes.data() + i));
    }
  }
}

}  // namespace detail

/// VTK XML PolyData writer. Binary mode uses the raw appended encoding with
/// UInt32 byte-count headers; nothing is compressed. Returns bytes written.
inline std::size_t write_vtp(const PolyData& pd, const std::filesystem::path& path,
                             VtpMode mode = VtpMode::binary) {
  pd.validate();
  using detail::ArrayBlock;

  std::vector<std::int64_t> vert_offsets(pd.verts.size());
  for (std::size_t i = 0; i < vert_offsets.size(); ++i) vert_offsets[i] = static_cast<std::int64_t>(i + 1);
  std::vector<std::int64_t> quad_conn, quad_offsets;
  quad_conn.reserve(pd.quads.size() * 4);
  for (std::size_t i = 0; i < pd.quads.size(); ++i) {
    quad_conn.insert(quad_conn.end(), pd.quads[i].begin(), pd.quads[i].end());
    quad_offsets.push_back(static_cast<std::int64_t>(4 * (i + 1)));
  }

  struct Section {
    std::string tag;
    std::vector<ArrayBlock> arrays;
  };
  std::vector<Section> sections;
  {
    Section point_data{"PointData", {}};
    for (const auto& s : pd.scalars) point_data.arrays.push_back(detail::float_block(s.name, s.values));
    sections.push_back(std::move(point_data));
  }
  sections.push_back({"Points", {detail::points_block(pd)}});
  sections.push_back({"Verts", {detail::int_block("connectivity", pd.verts),
                                detail::int_block("offsets", vert_offsets)}});
  sections.push_back({"Polys", {detail::int_block("connectivity", quad_conn),
                                detail::int_block("offsets", quad_offsets)}});

  const bool binary = mode == VtpMode::binary;
  std::string xml;
  xml += "<?xml version=\"1.0\"?>\n";
  xml += "<VTKFile type=\"PolyData\" version=\"0.1\" byte_order=\"LittleEndian\"";
  xml += binary ? " header_type=\"UInt32\">\n" : ">\n";
  xml += "  <PolyData>\n";
  xml += "    <Piece NumberOfPoints=\"" + std::to_string(pd.points.size()) + "\" NumberOfVerts=\"" +
         std::to_string(pd.verts.size()) + "\" NumberOfLines=\"0\" NumberOfStrips=\"0\" NumberOfPolys=\"" +
         std::to_string(pd.quads.size()) + "\">\n";
  std::uint64_t offset = 0;
  for (const auto& sec : sections) {
    xml += "      <" + sec.tag;
    if (sec.tag == "PointData" && !pd.scalars.empty()) xml += " Scalars=\"" + pd.scalars.front().name + "\"";
    xml += ">\n";
    for (const auto& a : sec.arrays) {
      xml += "        <DataArray type=\"" + a.type + "\"";
      if (sec.tag != "Points") xml += " Name=\"" + a.name + "\"";
      if (a.components != 1) xml += " NumberOfComponents=\"" + std::to_string(a.components) + "\"";
      if (binary) {
        if (a.bytes.size() > UINT32_MAX) throw ShapeError("array too large for UInt32 header");
        xml += " format=\"appended\" offset=\"" + std::to_string(offset) + "\"/>\n";
        offset += 4 + a.bytes.size();
      } else {
        xml += " format=\"ascii\">\n          ";
        detail::ascii_values(xml, a);
        xml += "\n        </DataArray>\n";
      }
    }
    xml += "      </" + sec.tag + ">\n";
  }
  xml += "    </Piece>\n  </PolyData>\n";

  detail::FileSink sink(path);
  sink.write(xml);
  if (binary) {
    sink.write("  <AppendedData encoding=\"raw\">\n   _");
    for (const auto& sec : sections)
      for (const auto& a : sec.arrays) {
        std::string header;
        detail::append_le(header, static_cast<std::uint32_t>(a.bytes.size()));
        sink.write(header);
        sink.write(a.bytes);
      }
    sink.write("\n  </AppendedData>\n");
  }
  sink.write("</VTKFile>\n");
  return sink.finish();
}

// ---------------------------------------------------------------------------
// Reader for the subset produced by write_vtp
// ---------------------------------------------------------------------------

namespace detail {

struct XmlTag {
  std::string name;
  bool closing = false;
  bool self_closing = false;
  std::map<std::string, std::string> attrs;
  std::size_t end = 0;  // offset just past '>'
};

inline XmlTag parse_tag(std::string_view text, std::size_t lt) {
  const std::size_t gt = text.find('>', lt);
  if (gt == std::string_view::npos) throw ParseError("unterminated tag at offset " + std::to_string(lt));
  XmlTag tag;
  tag.end = gt + 1;
  std::string_view body = text.substr(lt + 1, gt - lt - 1);
  if (!body.empty() && body.front() == '/') {
    tag.closing = true;
    body.remove_prefix(1);
  }
  if (!body.empty() && body.back() == '/') {
    tag.self_closing = true;
    body.remove_suffix(1);
  }
  std::size_t i = 0;
  while (i < body.size() && !std::isspace(static_cast<unsigned char>(body[i]))) ++i;
  tag.name = std::string(body.substr(0, i));
  while (i < body.size()) {
    while (i < body.size() && std::isspace(static_cast<unsigned char>(body[i]))) ++i;
    if (i >= body.size()) break;
    const std::size_t eq = body.find('=', i);
    if (eq == std::string_view::npos) throw ParseError("malformed attribute in <" + tag.name + ">");
    std::string key(body.substr(i, eq - i));
    if (eq + 1 >= body.size() || body[eq + 1] != '"') {
      throw ParseError("unquoted attribute " + key + " in <" + tag.name + ">");
    }
    const std::size_t close = body.find('"', eq + 2);
    if (close == std::string_view::npos) throw ParseError("unterminated attribute " + key);
    tag.attrs[key] = std::string(body.substr(eq + 2, close - eq - 2));
    i = close + 1;
  }
  return tag;
}

struct ArrayRef {
  std::string section;
  std::string type;
  std::string name;
  int components = 1;
  bool appended = false;
  std::uint64_t offset = 0;
  std::string text;  // ascii payload
};

inline std::uint64_t attr_u64(const XmlTag& t, const std::string& key) {
  auto it = t.attrs.find(key);
  if (it == t.attrs.end()) throw ParseError("<" + t.name + "> missing attribute " + key);
  std::uint64_t v = 0;
  const auto* b = it->second.data();
  auto res = std::from_chars(b, b + it->second.size(), v);
  if (res.ec != std::errc() || res.ptr != b + it->second.size()) {
    throw ParseError("bad integer in " + key + "=\"" + it->second + "\"");
  }
  return v;
}

template <typename T>
std::vector<T> parse_ascii(const std::string& text, std::size_t expected, const std::string& what) {
  std::vector<T> out;
  out.reserve(expected);
  const char* p = text.data();
  const char* end = p + text.size();
  while (p < end) {
    while (p < end && std::isspace(static_cast<unsigned char>(*p))) ++p;
    if (p >= end) break;
    T v{};
    auto res = std::from_chars(p, end, v);
    if (res.ec != std::errc()) throw ParseError("bad number in " + what);
    out.push_back(v);
    p = res.ptr;
  }
  if (out.size() != expected) {
    throw ParseError(what + " has " + std::to_string(out.size()) + " values, expected " +
                     std::to_string(expected));
  }
  return out;
}

}  // namespace detail

/// Parses a file written by write_vtp (either mode). Throws ParseError naming
/// the missing or malformed element.
inline PolyData read_vtp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open", path.string());
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  const std::size_t appended_at = content.find("<AppendedData");
  const std::string_view xml = std::string_view(content).substr(0, appended_at);

  std::vector<std::string> stack;
  std::vector<detail::ArrayRef> arrays;
  bool saw_vtkfile = false, saw_piece = false, closed_vtkfile = false;
  std::uint64_t n_points = 0, n_verts = 0, n_polys = 0;
  std::string active;

  std::size_t pos = 0;
  while ((pos = xml.find('<', pos)) != std::string_view::npos) {
    if (xml.substr(pos, 2) == "<?") {
      pos = xml.find("?>", pos);
      if (pos == std::string_view::npos) throw ParseError("unterminated XML declaration");
      pos += 2;
      continue;
    }
    auto tag = detail::parse_tag(xml, pos);
    if (tag.closing) {
      if (stack.empty() || stack.back() != tag.name) throw ParseError("unexpected </" + tag.name + ">");
      stack.pop_back();
      if (tag.name == "VTKFile") closed_vtkfile = true;
      pos = tag.end;
      continue;
    }
    if (tag.name == "VTKFile") {
      saw_vtkfile = true;
      if (tag.attrs["type"] != "PolyData") throw ParseError("VTKFile type is not PolyData");
      if (tag.attrs.count("byte_order") && tag.attrs["byte_order"] != "LittleEndian") {
        throw ParseError("unsupported byte_order " + tag.attrs["byte_order"]);
      }
      if (tag.attrs.count("header_type") && tag.attrs["header_type"] != "UInt32") {
        throw ParseError("unsupported header_type " + tag.attrs["header_type"]);
      }
      if (tag.attrs.count("compressor")) throw ParseError("compressed data is not supported");
    } else if (tag.name == "Piece") {
      if (saw_piece) throw ParseError("multiple <Piece> elements are not supported");
      saw_piece = true;
      n_points = detail::attr_u64(tag, "NumberOfPoints");
      n_verts = tag.attrs.count("NumberOfVerts") ? detail::attr_u64(tag, "NumberOfVerts") : 0;
      n_polys = tag.attrs.count("NumberOfPolys") ? detail::attr_u64(tag, "NumberOfPolys") : 0;
      if ((tag.attrs.count("NumberOfLines") && tag.attrs["NumberOfLines"] != "0") ||
          (tag.attrs.count("NumberOfStrips") && tag.attrs["NumberOfStrips"] != "0")) {
        throw ParseError("lines and strips are not supported");
      }
    } else if (tag.name == "PointData") {
      if (tag.attrs.count("Scalars")) active = tag.attrs["Scalars"];
    } else if (tag.name == "DataArray") {
      if (stack.empty()) throw ParseError("<DataArray> outside a section");
      detail::ArrayRef a;
      a.section = stack.back();
      a.type = tag.attrs["type"];
      a.name = tag.attrs.count("Name") ? tag.attrs["Name"] : "";
      a.components = tag.attrs.count("NumberOfComponents")
                         ? static_cast<int>(detail::attr_u64(tag, "NumberOfComponents"))
                         : 1;
      const std::string format = tag.attrs["format"];
      if (format == "appended") {
        a.appended = true;
        a.offset = detail::attr_u64(tag, "offset");
      } else if (format == "ascii") {
        if (tag.self_closing) {
          a.text.clear();
        } else {
          const std::size_t close = xml.find("</DataArray>", tag.end);
          if (close == std::string_view::npos) throw ParseError("missing </DataArray>");
          a.text = std::string(xml.substr(tag.end, close - tag.end));
          pos = close + std::string_view("</DataArray>").size();
          arrays.push_back(std::move(a));
          continue;
        }
      } else {
        throw ParseError("unsupported DataArray format '" + format + "'");
      }
      arrays.push_back(std::move(a));
    }
    if (!tag.self_closing) stack.push_back(tag.name);
    pos = tag.end;
  }
  if (!saw_vtkfile) throw ParseError("missing <VTKFile>");
  if (!saw_piece) throw ParseError("missing <Piece>");

  // Raw appended payload begins after the '_' marker.
  const char* raw = nullptr;
  std::size_t raw_len = 0;
  bool any_appended = false;
  for (const auto& a : arrays) any_appended = any_appended || a.appended;
  if (any_appended) {
    if (appended_at == std::string::npos) throw ParseError("missing <AppendedData>");
    const std::size_t underscore = content.find('_', appended_at);
    if (underscore == std::string::npos) throw ParseError("missing <AppendedData> marker '_'");
    raw = content.data() + underscore + 1;
    raw_len = content.size() - underscore - 1;
  } else if (!closed_vtkfile) {
    throw ParseError("missing </VTKFile>");
  }

  std::uint64_t raw_end = 0;
  auto payload = [&](const detail::ArrayRef& a, std::size_t elem_size, std::size_t count) -> std::string {
    const std::string what = a.section + "/" + (a.name.empty() ? a.section : a.name);
    if (!a.appended) {
      std::string bytes;
      if (elem_size == 4) {
        for (float v : detail::parse_ascii<float>(a.text, count, what)) detail::append_le(bytes, v);
      } else {
        for (auto v : detail::parse_ascii<std::int64_t>(a.text, count, what)) detail::append_le(bytes, v);
      }
      return bytes;
    }
    if (a.offset + 4 > raw_len) throw ParseError("truncated <AppendedData> reading " + what);
    const auto n = detail::read_le<std::uint32_t>(raw + a.offset);
    if (n != elem_size * count) {
      throw ParseError(what + " holds " + std::to_string(n) + " bytes, expected " +
                       std::to_string(elem_size * count));
    }
    if (a.offset + 4 + n > raw_len) throw ParseError("truncated <AppendedData> reading " + what);
    raw_end = std::max<std::uint64_t>(raw_end, a.offset + 4 + n);
    return std::string(raw + a.offset + 4, n);
  };

  PolyData pd;
  const detail::ArrayRef* points = nullptr;
  const detail::ArrayRef *vconn = nullptr, *voff = nullptr, *pconn = nullptr, *poff = nullptr;
  for (const auto& a : arrays) {
    if (a.section == "Points") points = &a;
    else if (a.section == "Verts" && a.name == "connectivity") vconn = &a;
    else if (a.section == "Verts" && a.name == "offsets") voff = &a;
    else if (a.section == "Polys" && a.name == "connectivity") pconn = &a;
    else if (a.section == "Polys" && a.name == "offsets") poff = &a;
  }
  if (!points) throw ParseError("missing <Points>");
  if (points->type != "Float32" || points->components != 3) throw ParseError("Points must be Float32 x3");
  {
    const auto bytes = payload(*points, 4, 3 * n_points);
    pd.points.resize(n_points);
    for (std::size_t i = 0; i < n_points; ++i)
      for (int c = 0; c < 3; ++c) pd.points[i][c] = detail::read_le<float>(bytes.data() + 4 * (3 * i + c));
  }
  for (const auto& a : arrays) {
    if (a.section != "PointData") continue;
    if (a.type != "Float32" || a.components != 1) throw ParseError("point scalar " + a.name + " must be Float32");
    const auto bytes = payload(a, 4, n_points);
    NamedArray s{a.name, std::vector<float>(n_points)};
    for (std::size_t i = 0; i < n_points; ++i) s.values[i] = detail::read_le<float>(bytes.data() + 4 * i);
    pd.scalars.push_back(std::move(s));
  }
  if (!active.empty() && (pd.scalars.empty() || pd.scalars.front().name != active)) {
    throw ParseError("active scalars '" + active + "' is not the first point array");
  }
  auto ints = [&](const detail::ArrayRef* a, std::size_t count, const char* what) {
    std::vector<std::int64_t> out(count);
    if (count == 0 && !a) return out;
    if (!a) throw ParseError(std::string("missing ") + what);
    if (a->type != "Int64") throw ParseError(std::string(what) + " must be Int64");
    const auto bytes = payload(*a, 8, count);
    for (std::size_t i = 0; i < count; ++i) out[i] = detail::read_le<std::int64_t>(bytes.data() + 8 * i);
    return out;
  };
  pd.verts = ints(vconn, n_verts, "<Verts> connectivity");
  const auto vo = ints(voff, n_verts, "<Verts> offsets");
  for (std::size_t i = 0; i < vo.size(); ++i)
    if (vo[i] != static_cast<std::int64_t>(i + 1)) throw ParseError("only single-point vertex cells are supported");
  const auto pc = ints(pconn, 4 * n_polys, "<Polys> connectivity");
  const auto po = ints(poff, n_polys, "<Polys> offsets");
  for (std::size_t i = 0; i < n_polys; ++i) {
    if (po[i] != static_cast<std::int64_t>(4 * (i + 1))) throw ParseError("only quad polygons are supported");
    pd.quads.push_back({pc[4 * i], pc[4 * i + 1], pc[4 * i + 2], pc[4 * i + 3]});
  }

  if (any_appended) {
    const std::string_view tail(raw + raw_end, raw_len - raw_end);
    if (tail.find("</AppendedData>") == std::string_view::npos) throw ParseError("missing </AppendedData>");
    if (tail.find("</VTKFile>") == std::string_view::npos) throw ParseError("missing </VTKFile>");
  }
  try {
    pd.validate();
  } catch (const ShapeError& e) {
    throw ParseError(std::string("invalid geometry: ") + e.what());
  }
  return pd;
}

}  // namespace cnnscope
