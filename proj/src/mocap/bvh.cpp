#include "stt/mocap/bvh.hpp"

#include <array>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace stt::mocap {

namespace {

constexpr std::array<std::string_view, 6> kChannelNames = {
    "Xposition", "Yposition", "Zposition", "Xrotation", "Yrotation", "Zrotation"};

struct Token {
  std::string_view text;
  std::size_t line;
};

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t line = 1;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '\n') {
      ++line;
      ++i;
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v') {
      ++i;
    } else {
      const std::size_t start = i;
      while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      tokens.push_back({text.substr(start, i - start), line});
    }
  }
  return tokens;
}

class Parser {
public:
  explicit Parser(std::string_view text) : tokens_(tokenize(text)) {}

  BvhDocument parse() {
    expect("HIERARCHY");
    expect("ROOT");
    parse_joint(std::nullopt);
    if (peek_is("ROOT")) fail("multiple ROOT joints are not supported");
    expect("MOTION");
    const std::size_t frames_line = current_line();
    const std::size_t frames = parse_frames();
    expect("Frame");
    expect("Time:");
    const double frame_time = number();

    std::size_t width = 0;
    for (const auto& j : joints_) width += j.channels.size();

    std::vector<std::vector<double>> rows;
    while (pos_ < tokens_.size()) {
      const std::size_t line = tokens_[pos_].line;
      std::vector<double> row;
      while (pos_ < tokens_.size() && tokens_[pos_].line == line) row.push_back(number());
      if (row.size() != width) {
        throw BvhError("channel-count mismatch: header declares " + std::to_string(width) +
                           " channels, motion row has " + std::to_string(row.size()),
                       line);
      }
      rows.push_back(std::move(row));
    }
    if (frames == 0 || rows.empty()) throw BvhError("empty motion section", frames_line);
    if (rows.size() != frames) {
      throw BvhError("frame count mismatch: header declares " + std::to_string(frames) +
                         " frames, found " + std::to_string(rows.size()) + " motion rows",
                     frames_line);
    }
    MotionMatrix motion(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(width));
    for (std::size_t r = 0; r < frames; ++r)
      for (std::size_t c = 0; c < width; ++c)
        motion(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    return BvhDocument(std::move(joints_), frame_time, std::move(motion));
  }

private:
  [[noreturn]] void fail(const std::string& what) const { throw BvhError(what, current_line()); }

  std::size_t current_line() const {
    if (tokens_.empty()) return 1;
    return pos_ < tokens_.size() ? tokens_[pos_].line : tokens_.back().line;
  }

  bool peek_is(std::string_view s) const { return pos_ < tokens_.size() && tokens_[pos_].text == s; }

  std::string_view next() {
    if (pos_ >= tokens_.size()) fail("unexpected end of file");
    return tokens_[pos_++].text;
  }

  void expect(std::string_view s) {
    if (pos_ >= tokens_.size()) fail("unexpected end of file, expected '" + std::string(s) + "'");
    if (tokens_[pos_].text != s)
      fail("expected '" + std::string(s) + "', found '" + std::string(tokens_[pos_].text) + "'");
    ++pos_;
  }

  double number() {
    const std::string_view t = next();
    double v = 0.0;
    const char* first = t.data();
    if (!t.empty() && t.front() == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
      --pos_;
      fail("expected a number, found '" + std::string(t) + "'");
    }
    return v;
  }

  std::size_t integer() {
    const std::string_view t = next();
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
      --pos_;
      fail("expected a non-negative integer, found '" + std::string(t) + "'");
    }
    return v;
  }

  std::size_t parse_frames() {
    const std::string_view t = next();
    if (t == "Frames:") return integer();
    if (t.starts_with("Frames:")) {
      std::size_t v = 0;
      auto rest = t.substr(7);
      auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), v);
      if (ec == std::errc() && ptr == rest.data() + rest.size()) return v;
    }
    --pos_;
    fail("expected 'Frames:'");
  }

  Eigen::Vector3d offset() {
    expect("OFFSET");
    Eigen::Vector3d v;
    v.x() = number();
    v.y() = number();
    v.z() = number();
    return v;
  }

  void parse_joint(std::optional<std::size_t> parent) {
    BvhJoint joint;
    joint.name = std::string(next());
    if (joint.name == "{") fail("joint is missing a name");
    joint.parent = parent;
    expect("{");
    joint.offset = offset();
    if (peek_is("CHANNELS")) {
      ++pos_;
      const std::size_t n = integer();
      if (n > 6) fail("a joint may declare at most 6 channels");
      for (std::size_t i = 0; i < n; ++i) {
        const std::string_view name = next();
        auto ch = parse_channel(name);
        if (!ch) {
          --pos_;
          fail("unknown channel '" + std::string(name) + "'");
        }
        joint.channels.push_back(*ch);
      }
    }
    const std::size_t index = joints_.size();
    joints_.push_back(std::move(joint));
    while (true) {
      if (peek_is("JOINT")) {
        ++pos_;
        parse_joint(index);
      } else if (peek_is("End")) {
        ++pos_;
        expect("Site");
        expect("{");
        BvhJoint site;
        site.name = joints_[index].name + "_End";
        site.parent = index;
        site.offset = offset();
        site.is_end_site = true;
        expect("}");
        joints_.push_back(std::move(site));
      } else if (peek_is("}")) {
        ++pos_;
        return;
      } else {
        if (pos_ >= tokens_.size()) fail("unexpected end of file inside joint '" + joints_[index].name + "'");
        fail("unexpected token '" + std::string(tokens_[pos_].text) + "' in joint '" +
             joints_[index].name + "'");
      }
    }
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
  std::vector<BvhJoint> joints_;
};

void put_number(std::string& out, double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

void write_joint(std::string& out, const BvhDocument& doc, std::size_t j, int depth) {
  const BvhJoint& joint = doc.joint(j);
  const std::string indent(static_cast<std::size_t>(depth), '\t');
  if (joint.is_end_site) {
    out += indent + "End Site\n" + indent + "{\n";
  } else {
    out += indent + (joint.parent ? "JOINT " : "ROOT ") + joint.name + "\n" + indent + "{\n";
  }
  out += indent + "\tOFFSET ";
  for (int i = 0; i < 3; ++i) {
    if (i) out += ' ';
    put_number(out, joint.offset[i]);
  }
  out += '\n';
  if (!joint.is_end_site) {
    out += indent + "\tCHANNELS " + std::to_string(joint.channels.size());
    for (Channel c : joint.channels) {
      out += ' ';
      out += channel_name(c);
    }
    out += '\n';
    for (std::size_t child : doc.children(j)) write_joint(out, doc, child, depth + 1);
  }
  out += indent + "}\n";
}

}  // namespace

std::string_view channel_name(Channel c) { return kChannelNames[static_cast<std::size_t>(c)]; }

std::optional<Channel> parse_channel(std::string_view name) {
  for (std::size_t i = 0; i < kChannelNames.size(); ++i)
    if (kChannelNames[i] == name) return static_cast<Channel>(i);
  return std::nullopt;
}

BvhDocument::BvhDocument(std::vector<BvhJoint> joints, double frame_time, MotionMatrix motion)
    : joints_(std::move(joints)), frame_time_(frame_time), motion_(std::move(motion)) {
  if (joints_.empty()) throw BvhError("document has no joints");
  if (joints_.front().parent) throw BvhError("first joint must be the root");
  std::size_t offset = 0;
  for (std::size_t i = 0; i < joints_.size(); ++i) {
    const BvhJoint& j = joints_[i];
    if (i > 0 && (!j.parent || *j.parent >= i))
      throw BvhError("joint '" + j.name + "' must have a parent that precedes it");
    if (j.parent && joints_[*j.parent].is_end_site)
      throw BvhError("end site cannot have children (joint '" + j.name + "')");
    if (j.is_end_site && !j.channels.empty())
      throw BvhError("end site '" + j.name + "' cannot carry channels");
    channel_offsets_.push_back(offset);
    offset += j.channels.size();
  }
  if (motion_.rows() == 0) throw BvhError("empty motion section");
  if (static_cast<std::size_t>(motion_.cols()) != offset)
    throw BvhError("channel-count mismatch: hierarchy declares " + std::to_string(offset) +
                   " channels, motion has " + std::to_string(motion_.cols()));
}

std::optional<std::size_t> BvhDocument::find(std::string_view name) const {
  for (std::size_t i = 0; i < joints_.size(); ++i)
    if (joints_[i].name == name) return i;
  return std::nullopt;
}

std::vector<std::size_t> BvhDocument::children(std::size_t joint) const {
  std::vector<std::size_t> out;
  for (std::size_t i = joint + 1; i < joints_.size(); ++i)
    if (joints_[i].parent == joint) out.push_back(i);
  return out;
}

BvhDocument parse_bvh(std::string_view text) { return Parser(text).parse(); }

BvhDocument load_bvh(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw BvhError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_bvh(ss.str());
}

std::string write_bvh(const BvhDocument& doc) {
  std::string out = "HIERARCHY\n";
  write_joint(out, doc, 0, 0);
  out += "MOTION\nFrames: " + std::to_string(doc.frame_count()) + "\nFrame Time: ";
  put_number(out, doc.frame_time());
  out += '\n';
  const auto& m = doc.motion();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out += ' ';
      put_number(out, m(r, c));
    }
    out += '\n';
  }
  return out;
}

void save_bvh(const std::filesystem::path& path, const BvhDocument& doc) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw BvhError("cannot write " + path.string());
  os << write_bvh(doc);
}

}  // namespace stt::mocap
