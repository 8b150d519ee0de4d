#include "regconv/synth.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "regconv/random.hpp"

namespace regconv {

namespace {

constexpr const char* kDatasetVersion = "regconv-ds-v1";
constexpr int kMaxAttempts = 100;

std::array<Vec2, 4> corners(const RRoI& b) {
  return {b.local_to_image(-b.w / 2, -b.h / 2), b.local_to_image(b.w / 2, -b.h / 2),
          b.local_to_image(b.w / 2, b.h / 2), b.local_to_image(-b.w / 2, b.h / 2)};
}

// Separating axis test for two rotated rectangles, each grown by gap / 2.
bool boxes_overlap(RRoI a, RRoI b, double gap) {
  a.w += gap;
  a.h += gap;
  b.w += gap;
  b.h += gap;
  const auto ca = corners(a), cb = corners(b);
  for (const RRoI* box : {&a, &b}) {
    for (int e = 0; e < 2; ++e) {
      const Vec2 axis = turn(box->theta, e == 0 ? Vec2{1, 0} : Vec2{0, 1});
      auto project = [&](const std::array<Vec2, 4>& pts) {
        double lo = 1e300, hi = -1e300;
        for (const auto& p : pts) {
          const double d = p.x * axis.x + p.y * axis.y;
          lo = std::min(lo, d);
          hi = std::max(hi, d);
        }
        return std::pair{lo, hi};
      };
      const auto [alo, ahi] = project(ca);
      const auto [blo, bhi] = project(cb);
      if (ahi < blo || bhi < alo) return false;
    }
  }
  return true;
}

double placement_radius(std::size_t side) {
  return static_cast<double>(side) / 2.0 - static_cast<double>(scene_margin(side)) - 1.0;
}

void render(Tensor& img, const RRoI& b, ShapeClass cls, const std::vector<double>& color, int ss) {
  const std::size_t side = img.width();
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& p : corners(b)) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const auto clampi = [&](double v) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(side - 1)));
  };
  const double inv = 1.0 / static_cast<double>(ss * ss);
  for (std::size_t y = clampi(std::floor(ymin)); y <= clampi(std::ceil(ymax)); ++y) {
    for (std::size_t x = clampi(std::floor(xmin)); x <= clampi(std::ceil(xmax)); ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double px = static_cast<double>(x) - 0.5 + (sx + 0.5) / ss;
          const double py = static_cast<double>(y) - 0.5 + (sy + 0.5) / ss;
          const Vec2 l = turn(-b.theta, {px - b.x, py - b.y});
          if (shape_contains(cls, b.w, b.h, l.x, l.y)) ++hits;
        }
      }
      if (hits == 0) continue;
      for (std::size_t c = 0; c < img.dim(0); ++c) img.at(c, y, x) += color[c] * hits * inv;
    }
  }
}

void check_interior(const SyntheticScene& s) {
  const auto side = static_cast<double>(s.side());
  const auto m = static_cast<double>(scene_margin(s.side()));
  for (const auto& a : s.annotations) {
    for (const auto& p : corners(a.box)) {
      if (p.x < m || p.y < m || p.x > side - 1 - m || p.y > side - 1 - m) throw Error("object not interior");
    }
  }
}

nlohmann::json annotations_json(const SyntheticScene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& a : s.annotations) {
    objs.push_back({{"class", to_string(a.label)},
                    {"x", a.box.x},
                    {"y", a.box.y},
                    {"w", a.box.w},
                    {"h", a.box.h},
                    {"theta", a.box.theta}});
  }
  return {{"seed", s.seed}, {"objects", objs}};
}

}  // namespace

std::string to_string(ShapeClass c) {
  switch (c) {
    case ShapeClass::Rect: return "rect";
    case ShapeClass::Ellipse: return "ellipse";
    case ShapeClass::LShape: return "L-shape";
    case ShapeClass::TShape: return "T-shape";
  }
  return "unknown";
}

ShapeClass shape_class_from_string(const std::string& name) {
  for (int i = 0; i < kNumShapeClasses; ++i) {
    if (to_string(static_cast<ShapeClass>(i)) == name) return static_cast<ShapeClass>(i);
  }
  throw Error("unknown shape class '" + name + "'");
}

void SceneOptions::validate() const {
  if (side < 64) throw Error("scene side must be >= 64");
  if (num_objects > 8) throw Error("at most 8 objects per scene");
  if (channels != 1 && channels != 3) throw Error("scenes have 1 or 3 channels");
  if (supersample < 1) throw Error("supersampling factor must be >= 1");
  if (noise_sigma < 0) throw Error("noise sigma must be >= 0");
}

bool shape_contains(ShapeClass c, double w, double h, double u, double v) {
  if (std::abs(u) > w / 2 || std::abs(v) > h / 2) return false;
  switch (c) {
    case ShapeClass::Rect: return true;
    case ShapeClass::Ellipse: {
      const double a = 2 * u / w, b = 2 * v / h;
      return a * a + b * b <= 1.0;
    }
    case ShapeClass::LShape: return !(u > 0 && v < 0);
    case ShapeClass::TShape: return !(v > 0 && std::abs(u) > w / 4);
  }
  return false;
}

std::size_t scene_margin(std::size_t side) { return (side + 7) / 8; }

SyntheticScene gen_scene(std::uint64_t seed, const SceneOptions& opt) {
  opt.validate();
  SplitMix64 rng(seed);
  const auto side = static_cast<double>(opt.side);
  const double center = (side - 1) / 2;
  const double radius = placement_radius(opt.side);
  SyntheticScene scene{Tensor({opt.channels, opt.side, opt.side}), {}, seed};
  std::vector<std::vector<double>> colors;
  for (std::size_t n = 0; n < opt.num_objects; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      const auto cls = opt.forced_class ? *opt.forced_class : static_cast<ShapeClass>(rng.below(kNumShapeClasses));
      const double w = rng.uniform(side / 10, side / 4);
      const double h = rng.uniform(side / 10, side / 4);
      const double theta = opt.forced_theta ? *opt.forced_theta : rng.uniform(0, 2 * std::numbers::pi);
      const double reach = radius - std::hypot(w, h) / 2;
      const double r = reach * std::sqrt(rng.uniform());
      const double phi = rng.uniform(0, 2 * std::numbers::pi);
      const RRoI box = make_rroi(center + r * std::cos(phi), center + r * std::sin(phi), w, h, theta);
      const bool clash = std::any_of(scene.annotations.begin(), scene.annotations.end(),
                                     [&](const Annotation& a) { return boxes_overlap(a.box, box, 2.0); });
      if (reach < 0 || clash) continue;
      std::vector<double> color(opt.channels);
      for (auto& c : color) c = rng.uniform(0.6, 1.0);
      scene.annotations.push_back({box, cls});
      colors.push_back(std::move(color));
      placed = true;
    }
    if (!placed) {
      throw Error("overcrowded scene: could not place object " + std::to_string(n + 1) + " after " +
                  std::to_string(kMaxAttempts) + " attempts");
    }
  }
  for (std::size_t i = 0; i < scene.annotations.size(); ++i) {
    render(scene.image, scene.annotations[i].box, scene.annotations[i].label, colors[i], opt.supersample);
  }
  if (opt.noise) {
    for (auto& v : scene.image.values()) v += opt.noise_sigma * rng.normal();
  }
  return scene;
}

SyntheticScene rotate_scene_by(const SyntheticScene& s, double angle) {
  SyntheticScene out{rotate_planar(s.image, angle), {}, s.seed};
  const Vec2 c = geometric_center(s.image);
  for (const auto& a : s.annotations) out.annotations.push_back({act_on_rroi(a.box, angle, c), a.label});
  check_interior(out);
  return out;
}

SyntheticScene rotate_scene(const SyntheticScene& s, int k, const CyclicGroup& g) {
  return rotate_scene_by(s, g.angle_of(k));
}

Tensor rroi_mask(const RRoI& b, std::size_t side) {
  Tensor m({side, side});
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const Vec2 l = turn(-b.theta, {static_cast<double>(x) - b.x, static_cast<double>(y) - b.y});
      if (std::abs(l.x) <= b.w / 2 && std::abs(l.y) <= b.h / 2) m.at(0, y, x) = 1.0;
    }
  }
  return m;
}

void write_dataset(std::ostream& os, const std::vector<SyntheticScene>& scenes) {
  const std::size_t side = scenes.empty() ? 0 : scenes.front().side();
  const std::size_t channels = scenes.empty() ? 0 : scenes.front().image.dim(0);
  nlohmann::json header{{"version", kDatasetVersion}, {"side", side}, {"count", scenes.size()}, {"channels", channels}};
  os << header.dump() << '\n';
  for (const auto& s : scenes) {
    if (s.side() != side || s.image.dim(0) != channels) throw Error("dataset scenes must share side and channels");
    write_tensor(os, s.image);
    os << annotations_json(s).dump() << '\n';
  }
  if (!os) throw Error("failed to write dataset");
}

std::vector<SyntheticScene> read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error("truncated dataset: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw Error("bad magic: dataset header is not JSON");
  }
  if (!header.is_object() || !header.contains("version")) throw Error("bad magic: dataset header has no version");
  const auto version = header["version"].get<std::string>();
  if (version != kDatasetVersion) {
    throw Error("dataset version mismatch: expected " + std::string(kDatasetVersion) + ", got " + version);
  }
  const auto count = header.at("count").get<std::size_t>();
  const auto side = header.at("side").get<std::size_t>();
  const auto channels = header.at("channels").get<std::size_t>();
  std::vector<SyntheticScene> scenes;
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticScene s;
    try {
      s.image = read_tensor(is);
    } catch (const Error& e) {
      if (is.eof()) throw Error("truncated dataset: scene " + std::to_string(i) + " of " + std::to_string(count));
      throw;
    }
    if (s.image.rank() != 3 || s.image.dim(0) != channels || s.image.width() != side || s.image.height() != side) {
      throw Error("dataset scene " + std::to_string(i) + " does not match header shape");
    }
    if (!std::getline(is, line)) {
      throw Error("truncated dataset: scene " + std::to_string(i) + " has no annotation line");
    }
    try {
      const auto j = nlohmann::json::parse(line);
      s.seed = j.at("seed").get<std::uint64_t>();
      for (const auto& o : j.at("objects")) {
        const RRoI box{o.at("x").get<double>(), o.at("y").get<double>(), o.at("w").get<double>(),
                       o.at("h").get<double>(), o.at("theta").get<double>()};
        s.annotations.push_back({box, shape_class_from_string(o.at("class").get<std::string>())});
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed annotation for scene " + std::to_string(i) + ": " + e.what());
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

void save_dataset(const std::string& path, const std::vector<SyntheticScene>& scenes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_dataset(os, scenes);
}

std::vector<SyntheticScene> load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  return read_dataset(is);
}

void save_png(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw Error("PNG export needs a (1 or 3, H, W) image, got " + shape_string(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.height(), w = image.width();
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw Error("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error("PNG encoding failed for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(w * c);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(image.at(ch, y, x), 0.0, 1.0);
        row[x * c + ch] = static_cast<png_byte>(std::lround(v * 255.0));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace regconv
