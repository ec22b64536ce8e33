#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

#include "cnnscope/error.hpp"
#include "cnnscope/polydata.hpp"
#include "cnnscope/views.hpp"

namespace cnnscope {

using ojson = nlohmann::ordered_json;

inline constexpr int kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxFrameBytes = 1u << 30;

struct ProtocolError : Error {
  using Error::Error;
};

enum class FrameType {
  hello,
  step_begin,
  geometry,
  similarity,
  prune_proposal,
  prune_command,
  prune_ack,
  step_end,
  bye
};

inline std::string_view frame_type_name(FrameType t) {
  switch (t) {
    case FrameType::hello: return "hello";
    case FrameType::step_begin: return "step_begin";
    case FrameType::geometry: return "geometry";
    case FrameType::similarity: return "similarity";
    case FrameType::prune_proposal: return "prune_proposal";
    case FrameType::prune_command: return "prune_command";
    case FrameType::prune_ack: return "prune_ack";
    case FrameType::step_end: return "step_end";
    case FrameType::bye: return "bye";
  }
  return "?";
}

inline FrameType parse_frame_type(std::string_view s) {
  for (int i = 0; i <= static_cast<int>(FrameType::bye); ++i) {
    const auto t = static_cast<FrameType>(i);
    if (frame_type_name(t) == s) return t;
  }
  throw ProtocolError("unknown frame type '" + std::string(s) + "'");
}

/// Envelope {type, step, seq, body}. Session-level frames (hello, bye) use step -1.
struct Frame {
  FrameType type = FrameType::hello;
  std::int64_t step = -1;
  std::uint64_t seq = 0;
  ojson body = ojson::object();

  ojson to_json() const {
    ojson j;
    j["type"] = frame_type_name(type);
    j["step"] = step;
    j["seq"] = seq;
    j["body"] = body;
    return j;
  }

  static Frame from_json(const ojson& j) {
    try {
      Frame f;
      f.type = parse_frame_type(j.at("type").get<std::string>());
      f.step = j.at("step").get<std::int64_t>();
      f.seq = j.at("seq").get<std::uint64_t>();
      f.body = j.at("body");
      return f;
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("malformed frame: ") + e.what());
    }
  }
};

/// 4-byte big-endian payload length followed by the UTF-8 payload.
inline std::string encode_frame(std::string_view payload) {
  if (payload.size() > kMaxFrameBytes) throw ProtocolError("frame payload too large");
  const auto n = static_cast<std::uint32_t>(payload.size());
  std::string out;
  out.reserve(4 + payload.size());
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out.append(payload);
  return out;
}

inline std::string encode_frame(const Frame& f) { return encode_frame(f.to_json().dump()); }

/// Reassembles payloads from an arbitrarily chunked byte stream.
class FrameSplitter {
 public:
  void feed(std::string_view bytes) { buffer_.append(bytes); }

  std::optional<std::string> next() {
    if (buffer_.size() - read_ < 4) return std::nullopt;
    const auto* p = reinterpret_cast<const unsigned char*>(buffer_.data() + read_);
    const std::uint32_t n = (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
                            (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
    if (n > kMaxFrameBytes) throw ProtocolError("frame length " + std::to_string(n) + " exceeds limit");
    if (buffer_.size() - read_ < 4 + std::size_t{n}) return std::nullopt;
    std::string payload = buffer_.substr(read_ + 4, n);
    read_ += 4 + n;
    if (read_ > (1u << 20) && read_ * 2 > buffer_.size()) {
      buffer_.erase(0, read_);
      read_ = 0;
    }
    return payload;
  }

  std::optional<Frame> next_frame() {
    auto payload = next();
    if (!payload) return std::nullopt;
    ojson j;
    try {
      j = ojson::parse(*payload);
    } catch (const nlohmann::json::parse_error& e) {
      throw ProtocolError(std::string("frame payload is not JSON: ") + e.what());
    }
    return Frame::from_json(j);
  }

  std::size_t buffered() const { return buffer_.size() - read_; }

 private:
  std::string buffer_;
  std::size_t read_ = 0;
};

// ---------------------------------------------------------------------------
// Geometry bodies
// ---------------------------------------------------------------------------

struct Geometry {
  View view = View::weight_grid;
  std::size_t layer = 0;
  PolyData data;
  bool operator==(const Geometry&) const = default;
};

/// {view, layer, points, quads, verts, scalars}; arrays are flat.
inline ojson geometry_body(const Geometry& g) {
  ojson body;
  body["view"] = view_name(g.view);
  body["layer"] = g.layer;
  auto& pts = body["points"] = ojson::array();
  for (const auto& p : g.data.points)
    for (float v : p) pts.push_back(v);
  auto& quads = body["quads"] = ojson::array();
  for (const auto& q : g.data.quads)
    for (auto v : q) quads.push_back(v);
  body["verts"] = g.data.verts;
  auto& scalars = body["scalars"] = ojson::object();
  for (const auto& s : g.data.scalars) scalars[s.name] = s.values;
  return body;
}

inline Geometry parse_geometry_body(const ojson& body) {
  try {
    Geometry g;
    g.view = parse_view(body.at("view").get<std::string>());
    g.layer = body.at("layer").get<std::size_t>();
    const auto& pts = body.at("points");
    if (pts.size() % 3 != 0) throw ProtocolError("points array length is not a multiple of 3");
    g.data.points.resize(pts.size() / 3);
    for (std::size_t i = 0; i < pts.size(); ++i) g.data.points[i / 3][i % 3] = pts[i].get<float>();
    const auto& quads = body.at("quads");
    if (quads.size() % 4 != 0) throw ProtocolError("quads array length is not a multiple of 4");
    g.data.quads.resize(quads.size() / 4);
    for (std::size_t i = 0; i < quads.size(); ++i) g.data.quads[i / 4][i % 4] = quads[i].get<std::int64_t>();
    body.at("verts").get_to(g.data.verts);
    for (const auto& [name, values] : body.at("scalars").items()) {
      g.data.scalars.push_back({name, values.get<std::vector<float>>()});
    }
    g.data.validate();
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed geometry body: ") + e.what());
  } catch (const ShapeError& e) {
    throw ProtocolError(std::string("inconsistent geometry body: ") + e.what());
  }
}

}  // namespace cnnscope
