#include "mbfuse/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mbfuse {

namespace fs = std::filesystem;

namespace {

// Next header token of a PNM file, skipping whitespace and # comments.
std::string pnm_token(std::istream& in, const std::string& path) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(ch);
  }
  if (tok.empty()) throw ParseError(path + ": truncated PNM header");
  return tok;
}

void write_pnm(const std::string& path, const Tensor<float>& img, int channels, const char* magic) {
  const Shape& s = img.shape();
  if (s.rank() != 3 || s.dims()[0] != channels) {
    throw ShapeError(path + ": expected (" + std::to_string(channels) + ",H,W) image, got " + s.str());
  }
  const int h = s.dims()[1], w = s.dims()[2];
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> buf(plane * channels);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < channels; ++c) {
      const double v = std::clamp(static_cast<double>(img[c * plane + i]), 0.0, 1.0);
      buf[i * channels + c] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace

Tensor<float> read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  const std::string magic = pnm_token(in, path);
  int channels = 0;
  if (magic == "P6") {
    channels = 3;
  } else if (magic == "P5") {
    channels = 1;
  } else {
    throw ParseError(path + ": unsupported PNM type '" + magic + "'");
  }
  const int w = std::stoi(pnm_token(in, path));
  const int h = std::stoi(pnm_token(in, path));
  const int maxval = std::stoi(pnm_token(in, path));
  if (w <= 0 || h <= 0 || maxval != 255) throw ParseError(path + ": only 8-bit images with maxval 255 are supported");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> buf(plane * channels);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw ParseError(path + ": truncated pixel data");
  Tensor<float> img(Shape{channels, h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < channels; ++c) img[c * plane + i] = static_cast<float>(buf[i * channels + c] / 255.0);
  }
  return img;
}

void write_ppm(const std::string& path, const Tensor<float>& rgb) { write_pnm(path, rgb, 3, "P6"); }
void write_pgm(const std::string& path, const Tensor<float>& gray) { write_pnm(path, gray, 1, "P5"); }

std::vector<GroundTruthBox> parse_annotations(std::istream& in, const std::string& source) {
  std::vector<GroundTruthBox> boxes;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '%') continue;
    std::istringstream ss(line);
    GroundTruthBox g;
    int occ = 0;
    if (!(ss >> g.label >> g.box.x >> g.box.y >> g.box.w >> g.box.h >> occ)) {
      throw ParseError(source + ":" + std::to_string(line_no) + ": expected 'label x y w h occ'");
    }
    if (occ < 0 || occ > 2) throw ParseError(source + ":" + std::to_string(line_no) + ": occlusion must be 0, 1 or 2");
    if (!(g.box.w > 0.0 && g.box.h > 0.0)) {
      throw ParseError(source + ":" + std::to_string(line_no) + ": box extents must be positive");
    }
    g.occlusion = static_cast<Occlusion>(occ);
    g.ignore = g.label != "person";
    boxes.push_back(g);
  }
  return boxes;
}

std::vector<GroundTruthBox> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  return parse_annotations(in, path);
}

void write_annotations(std::ostream& out, const std::vector<GroundTruthBox>& boxes) {
  out << "% bbGt version=3\n";
  std::ostringstream num;
  num.precision(10);
  for (const auto& g : boxes) {
    num.str("");
    num << g.box.x << ' ' << g.box.y << ' ' << g.box.w << ' ' << g.box.h;
    out << g.label << ' ' << num.str() << ' ' << static_cast<int>(g.occlusion) << '\n';
  }
}

void save_annotations(const std::string& path, const std::vector<GroundTruthBox>& boxes) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_annotations(out, boxes);
}

void save_dataset(const std::string& dir, const std::vector<SyntheticScene>& scenes) {
  for (const char* sub : {"visible", "lwir", "annotations"}) fs::create_directories(fs::path(dir) / sub);
  std::ofstream labels(fs::path(dir) / "labels.txt");
  if (!labels) throw Error("cannot write labels in " + dir);
  for (const auto& s : scenes) {
    write_ppm((fs::path(dir) / "visible" / (s.id + ".ppm")).string(), s.rgb);
    write_pgm((fs::path(dir) / "lwir" / (s.id + ".pgm")).string(), s.thermal);
    save_annotations((fs::path(dir) / "annotations" / (s.id + ".txt")).string(), s.boxes);
    labels << s.id << ' ' << (s.day ? "day" : "night") << '\n';
  }
}

std::vector<SyntheticScene> load_dataset(const std::string& dir) {
  const std::string labels_path = (fs::path(dir) / "labels.txt").string();
  std::vector<SyntheticScene> scenes;
  int line_no = 0;
  for (const auto& line : read_lines(labels_path)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    SyntheticScene s;
    std::string regime;
    if (!(ss >> s.id >> regime) || (regime != "day" && regime != "night")) {
      throw ParseError(labels_path + ":" + std::to_string(line_no) + ": expected '<id> day|night'");
    }
    s.day = regime == "day";
    s.rgb = read_pnm((fs::path(dir) / "visible" / (s.id + ".ppm")).string());
    s.thermal = read_pnm((fs::path(dir) / "lwir" / (s.id + ".pgm")).string());
    if (s.rgb.shape().dims()[0] != 3 || s.thermal.shape().dims()[0] != 1 ||
        s.rgb.shape().dims()[1] != s.thermal.shape().dims()[1] ||
        s.rgb.shape().dims()[2] != s.thermal.shape().dims()[2]) {
      throw ShapeError(dir + ": frame " + s.id + " has mismatched modalities");
    }
    s.boxes = load_annotations((fs::path(dir) / "annotations" / (s.id + ".txt")).string());
    scenes.push_back(std::move(s));
  }
  if (scenes.empty()) throw Error(dir + ": dataset has no frames");
  return scenes;
}

}  // namespace mbfuse
