#include "msht/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "msht/seed.hpp"

namespace msht {

namespace fs = std::filesystem;

namespace {

cv::Mat to_mat(const RgbImage& img) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  std::copy(img.pixels.begin(), img.pixels.end(), m.data);
  return m;
}

RgbImage from_mat(const cv::Mat& m) {
  RgbImage img(m.cols, m.rows);
  cv::Mat cont = m.isContinuous() ? m : m.clone();
  std::copy(cont.data, cont.data + img.pixels.size(), img.pixels.begin());
  return img;
}

void check_image(const RgbImage& img, const char* what) {
  if (img.width <= 0 || img.height <= 0 ||
      img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
    throw std::invalid_argument(std::string(what) + ": malformed image");
  }
}

// Float RGB planes in [0, 1], H x W x 3 interleaved.
struct FloatImage {
  int width = 0, height = 0;
  std::vector<double> v;
};

FloatImage to_float(const RgbImage& img) {
  FloatImage f{img.width, img.height, std::vector<double>(img.pixels.size())};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) f.v[i] = img.pixels[i] / 255.0;
  return f;
}

double gray(const double* p) { return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]; }

void clamp01(FloatImage& f) {
  for (double& x : f.v) x = std::clamp(x, 0.0, 1.0);
}

void adjust_brightness(FloatImage& f, double b) {
  for (double& x : f.v) x *= b;
  clamp01(f);
}

void adjust_contrast(FloatImage& f, double c) {
  double mean = 0.0;
  const std::size_t n = f.v.size() / 3;
  for (std::size_t i = 0; i < n; ++i) mean += gray(&f.v[i * 3]);
  mean /= static_cast<double>(n);
  for (double& x : f.v) x = c * x + (1.0 - c) * mean;
  clamp01(f);
}

void adjust_saturation(FloatImage& f, double s) {
  const std::size_t n = f.v.size() / 3;
  for (std::size_t i = 0; i < n; ++i) {
    double* p = &f.v[i * 3];
    const double g = gray(p);
    for (int c = 0; c < 3; ++c) p[c] = s * p[c] + (1.0 - s) * g;
  }
  clamp01(f);
}

void adjust_hue(FloatImage& f, double shift) {
  const std::size_t n = f.v.size() / 3;
  for (std::size_t i = 0; i < n; ++i) {
    double* p = &f.v[i * 3];
    const double r = p[0], g = p[1], b = p[2];
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double delta = mx - mn;
    double h = 0.0;
    if (delta > 0.0) {
      if (mx == r) h = std::fmod((g - b) / delta, 6.0);
      else if (mx == g) h = (b - r) / delta + 2.0;
      else h = (r - g) / delta + 4.0;
      h /= 6.0;
    }
    const double s = mx > 0.0 ? delta / mx : 0.0;
    const double v = mx;
    h = h + shift;
    h -= std::floor(h);
    const double hh = h * 6.0;
    const int sector = static_cast<int>(hh) % 6;
    const double frac = hh - std::floor(hh);
    const double pp = v * (1 - s), q = v * (1 - s * frac), t = v * (1 - s * (1 - frac));
    switch (sector) {
      case 0: p[0] = v; p[1] = t; p[2] = pp; break;
      case 1: p[0] = q; p[1] = v; p[2] = pp; break;
      case 2: p[0] = pp; p[1] = v; p[2] = t; break;
      case 3: p[0] = pp; p[1] = q; p[2] = v; break;
      case 4: p[0] = t; p[1] = pp; p[2] = v; break;
      default: p[0] = v; p[1] = pp; p[2] = q; break;
    }
  }
}

RgbImage center_crop(const RgbImage& img, int edge) {
  if (img.width < edge || img.height < edge) {
    throw std::invalid_argument("image " + std::to_string(img.width) + "x" +
                                std::to_string(img.height) + " is smaller than crop edge " +
                                std::to_string(edge));
  }
  const int x0 = (img.width - edge) / 2;
  const int y0 = (img.height - edge) / 2;
  RgbImage out(edge, edge);
  for (int y = 0; y < edge; ++y) {
    const auto* src = &img.pixels[(static_cast<std::size_t>(y + y0) * img.width + x0) * 3];
    std::copy(src, src + static_cast<std::size_t>(edge) * 3,
              &out.pixels[static_cast<std::size_t>(y) * edge * 3]);
  }
  return out;
}

RgbImage rotate(const RgbImage& img, double angle_deg) {
  const cv::Point2f center(static_cast<float>(img.width - 1) / 2.0f,
                           static_cast<float>(img.height - 1) / 2.0f);
  const cv::Mat rot = cv::getRotationMatrix2D(center, angle_deg, 1.0);
  cv::Mat out;
  cv::warpAffine(to_mat(img), out, rot, cv::Size(img.width, img.height), cv::INTER_LINEAR,
                 cv::BORDER_REFLECT_101);
  return from_mat(out);
}

RgbImage flip_horizontal(const RgbImage& img) {
  RgbImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
    }
  }
  return out;
}

RgbImage quantize(const FloatImage& f) {
  RgbImage out(f.width, f.height);
  for (std::size_t i = 0; i < f.v.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(f.v[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

Tensor normalize(const RgbImage& img, const AugmentConfig& cfg) {
  const int h = img.height, w = img.width;
  Tensor t({3, h, w});
  double* d = t.data();
  for (int c = 0; c < 3; ++c) {
    const double inv = 1.0 / cfg.stddev[static_cast<std::size_t>(c)];
    const double m = cfg.mean[static_cast<std::size_t>(c)];
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        d[(static_cast<std::size_t>(c) * h + y) * w + x] = (img.at(y, x, c) / 255.0 - m) * inv;
      }
    }
  }
  return t;
}

RgbImage resize_to(const RgbImage& img, int edge) {
  if (img.width == edge && img.height == edge) return img;
  return resize_image(img, edge, edge);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

// Largest-remainder allocation of `total` across groups proportional to sizes.
std::vector<std::size_t> proportional_counts(const std::vector<std::size_t>& sizes,
                                             std::size_t total) {
  std::size_t all = 0;
  for (auto s : sizes) all += s;
  std::vector<std::size_t> out(sizes.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t used = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const double exact = static_cast<double>(sizes[i]) * static_cast<double>(total) / all;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    used += out[i];
    remainders.emplace_back(-(exact - std::floor(exact)), i);
  }
  std::sort(remainders.begin(), remainders.end());
  for (std::size_t r = 0; used < total; ++r, ++used) ++out[remainders[r].second];
  return out;
}

FoldPlan split_groups(std::vector<std::vector<std::string>> groups, std::size_t total,
                      std::uint64_t seed) {
  if (total < 10) {
    throw std::invalid_argument("split_folds needs at least 10 ids, got " +
                                std::to_string(total));
  }
  std::set<std::string> unique;
  for (const auto& g : groups) unique.insert(g.begin(), g.end());
  if (unique.size() != total) throw std::invalid_argument("split_folds: ids must be unique");

  std::mt19937_64 rng(seed);
  for (auto& g : groups) std::shuffle(g.begin(), g.end(), rng);

  const auto test_total = static_cast<std::size_t>(std::floor(0.2 * static_cast<double>(total) + 0.5));
  std::vector<std::size_t> sizes;
  for (const auto& g : groups) sizes.push_back(g.size());
  const auto test_counts = proportional_counts(sizes, test_total);

  FoldPlan plan;
  plan.seed = seed;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& g = groups[i];
    plan.test_ids.insert(plan.test_ids.end(), g.begin(),
                         g.begin() + static_cast<std::ptrdiff_t>(test_counts[i]));
    rest.insert(rest.end(), g.begin() + static_cast<std::ptrdiff_t>(test_counts[i]), g.end());
  }
  // Dealing the class-ordered remainder round-robin keeps both fold sizes and
  // class proportions within one of each other.
  for (std::size_t i = 0; i < rest.size(); ++i) plan.fold_ids[i % kFoldCount].push_back(rest[i]);
  return plan;
}

}  // namespace

std::string to_string(Label label) {
  return label == Label::positive ? "positive" : "negative";
}

Label parse_label(const std::string& text) {
  if (text == "positive" || text == "0") return Label::positive;
  if (text == "negative" || text == "1") return Label::negative;
  throw std::invalid_argument("unknown label '" + text + "' (expected positive or negative)");
}

RgbImage read_image(const fs::path& path) {
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot decode image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return from_mat(rgb);
}

std::vector<std::uint8_t> encode_png(const RgbImage& image) {
  check_image(image, "encode_png");
  cv::Mat bgr;
  cv::cvtColor(to_mat(image), bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", bgr, buf)) throw std::runtime_error("PNG encoding failed");
  return buf;
}

void write_png(const fs::path& path, const RgbImage& image) {
  const auto buf = encode_png(image);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

RgbImage resize_image(const RgbImage& image, int width, int height) {
  check_image(image, "resize_image");
  if (width <= 0 || height <= 0) throw std::invalid_argument("resize target must be positive");
  const bool shrink = width < image.width || height < image.height;
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(width, height), 0, 0,
             shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  return from_mat(out);
}

IngestResult ingest_directory(const fs::path& root, const IngestOptions& options) {
  if (!fs::is_directory(root)) throw std::runtime_error("data directory not found: " + root.string());
  IngestResult result;
  std::vector<std::pair<fs::path, Label>> files;
  for (Label label : {Label::positive, Label::negative}) {
    const fs::path dir = root / to_string(label);
    if (!fs::is_directory(dir)) {
      throw std::runtime_error("missing class directory " + dir.string());
    }
    std::vector<fs::path> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      if (entry.path().filename().string().starts_with(".")) continue;
      names.push_back(entry.path());
    }
    std::sort(names.begin(), names.end());
    for (auto& n : names) files.emplace_back(std::move(n), label);
  }

  std::map<std::string, int> stem_uses;
  for (const auto& [path, label] : files) ++stem_uses[path.stem().string()];

  std::map<Label, int> per_class;
  for (const auto& [path, label] : files) {
    RgbImage img;
    try {
      img = read_image(path);
      if (options.normalize_aspect &&
          (img.width != options.target_width || img.height != options.target_height)) {
        img = resize_image(img, options.target_width, options.target_height);
      }
    } catch (const std::exception& e) {
      result.warnings.push_back({path.string(), e.what()});
      continue;
    }
    const std::string stem = path.stem().string();
    std::string id = stem_uses[stem] > 1
                         ? (to_string(label) + "/" + path.filename().string())
                         : stem;
    result.images.push_back({std::move(img), label, std::move(id)});
    ++per_class[label];
  }
  for (Label label : {Label::positive, Label::negative}) {
    if (per_class[label] == 0) {
      throw std::runtime_error("no readable images in class directory " +
                               (root / to_string(label)).string());
    }
  }
  return result;
}

std::vector<std::string> FoldPlan::train_ids(int k) const {
  if (k < 0 || k >= kFoldCount) throw std::out_of_range("fold index out of range");
  std::vector<std::string> out;
  for (int i = 0; i < kFoldCount; ++i) {
    if (i == k) continue;
    out.insert(out.end(), fold_ids[static_cast<std::size_t>(i)].begin(),
               fold_ids[static_cast<std::size_t>(i)].end());
  }
  return out;
}

FoldPlan split_folds(const std::vector<std::string>& ids, std::uint64_t seed) {
  return split_groups({ids}, ids.size(), seed);
}

FoldPlan split_folds(const std::vector<std::string>& ids, const std::vector<Label>& labels,
                     std::uint64_t seed) {
  if (ids.size() != labels.size()) throw std::invalid_argument("ids and labels differ in length");
  std::vector<std::vector<std::string>> groups(2);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    groups[static_cast<std::size_t>(class_index(labels[i]))].push_back(ids[i]);
  }
  return split_groups(std::move(groups), ids.size(), seed);
}

AugmentConfig AugmentConfig::full() { return {}; }

AugmentConfig AugmentConfig::desk(int edge) {
  AugmentConfig c;
  c.crop_edge = edge;
  c.resize_edge = edge;
  return c;
}

void AugmentConfig::validate() const {
  if (crop_edge <= 0 || resize_edge <= 0) throw std::invalid_argument("crop and resize edges must be positive");
  if (rotation_deg < 0 || rotation_deg > 180) throw std::invalid_argument("rotation_deg must lie in [0, 180]");
  if (flip_prob < 0 || flip_prob > 1) throw std::invalid_argument("flip_prob must lie in [0, 1]");
  if (brightness < 0 || contrast < 0 || saturation < 0) {
    throw std::invalid_argument("jitter strengths must be non-negative");
  }
  if (hue < 0 || hue > 0.5) throw std::invalid_argument("hue must lie in [0, 0.5]");
  for (double s : stddev) {
    if (!(s > 0)) throw std::invalid_argument("normalization stddev must be positive");
  }
}

AugmentDraws sample_draws(const AugmentConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto around_one = [&](double s) { return std::max(0.0, 1.0 - s) + unit(rng) * (1.0 + s - std::max(0.0, 1.0 - s)); };
  AugmentDraws d;
  d.angle_deg = -cfg.rotation_deg + 2.0 * cfg.rotation_deg * unit(rng);
  d.flip = unit(rng) < cfg.flip_prob;
  d.brightness = around_one(cfg.brightness);
  d.contrast = around_one(cfg.contrast);
  d.saturation = around_one(cfg.saturation);
  d.hue = -cfg.hue + 2.0 * cfg.hue * unit(rng);
  return d;
}

Tensor augment_with(const RgbImage& image, const AugmentConfig& cfg, const AugmentDraws& d) {
  check_image(image, "augment");
  cfg.validate();
  RgbImage img = d.angle_deg != 0.0 ? rotate(image, d.angle_deg) : image;
  img = center_crop(img, cfg.crop_edge);
  if (d.flip) img = flip_horizontal(img);
  if (d.brightness != 1.0 || d.contrast != 1.0 || d.saturation != 1.0 || d.hue != 0.0) {
    FloatImage f = to_float(img);
    if (d.brightness != 1.0) adjust_brightness(f, d.brightness);
    if (d.contrast != 1.0) adjust_contrast(f, d.contrast);
    if (d.saturation != 1.0) adjust_saturation(f, d.saturation);
    if (d.hue != 0.0) adjust_hue(f, d.hue);
    img = quantize(f);
  }
  return normalize(resize_to(img, cfg.resize_edge), cfg);
}

Tensor augment_train(const RgbImage& image, const AugmentConfig& cfg, std::mt19937_64& rng) {
  return augment_with(image, cfg, sample_draws(cfg, rng));
}

RgbImage prepare_eval_image(const RgbImage& image, const AugmentConfig& cfg) {
  check_image(image, "preprocess_eval");
  cfg.validate();
  return resize_to(center_crop(image, cfg.crop_edge), cfg.resize_edge);
}

Tensor to_tensor(const RgbImage& image, const AugmentConfig& cfg) {
  check_image(image, "to_tensor");
  return normalize(image, cfg);
}

Tensor preprocess_eval(const RgbImage& image, const AugmentConfig& cfg) {
  return normalize(prepare_eval_image(image, cfg), cfg);
}

Tensor stack_batch(std::span<const Tensor> items) {
  if (items.empty()) throw std::invalid_argument("stack_batch: empty batch");
  const Shape& s = items.front().shape();
  Shape out_shape{static_cast<std::int64_t>(items.size())};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor out(out_shape);
  const std::int64_t n = items.front().numel();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != s) {
      throw ShapeError("stack_batch: item " + std::to_string(i) + " has shape " +
                       shape_to_string(items[i].shape()) + ", expected " + shape_to_string(s));
    }
    std::copy(items[i].data(), items[i].data() + n, out.data() + static_cast<std::int64_t>(i) * n);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Point {
  int y, x;
};

bool far_enough(const std::vector<Point>& pts, Point p, int min_dist) {
  for (const auto& q : pts) {
    const int dy = q.y - p.y, dx = q.x - p.x;
    if (dy * dy + dx * dx < min_dist * min_dist) return false;
  }
  return true;
}

int spread(const std::vector<Point>& pts) {
  int ymin = pts[0].y, ymax = pts[0].y, xmin = pts[0].x, xmax = pts[0].x;
  for (const auto& p : pts) {
    ymin = std::min(ymin, p.y); ymax = std::max(ymax, p.y);
    xmin = std::min(xmin, p.x); xmax = std::max(xmax, p.x);
  }
  return std::max(ymax - ymin, xmax - xmin);
}

std::vector<Point> place_blobs(const SynthSpec& s, bool clustered, std::mt19937_64& rng) {
  const int r = s.blob_radius;
  const int min_dist = 2 * r + 2;
  std::uniform_int_distribution<int> coord(r, s.edge - 1 - r);
  for (int attempt = 0; attempt < 2000; ++attempt) {
    std::vector<Point> pts;
    Point center{0, 0};
    if (clustered) {
      std::uniform_int_distribution<int> cc(s.cluster_radius + r, s.edge - 1 - s.cluster_radius - r);
      center = {cc(rng), cc(rng)};
    }
    for (int tries = 0; tries < 500 && static_cast<int>(pts.size()) < s.blobs; ++tries) {
      Point p{0, 0};
      if (clustered) {
        std::uniform_int_distribution<int> off(-s.cluster_radius, s.cluster_radius);
        p = {center.y + off(rng), center.x + off(rng)};
        const int dy = p.y - center.y, dx = p.x - center.x;
        if (dy * dy + dx * dx > s.cluster_radius * s.cluster_radius) continue;
      } else {
        p = {coord(rng), coord(rng)};
      }
      if (far_enough(pts, p, min_dist)) pts.push_back(p);
    }
    if (static_cast<int>(pts.size()) < s.blobs) continue;
    if (!clustered && spread(pts) < s.min_spread) continue;
    return pts;
  }
  throw std::runtime_error(std::string("could not place ") + std::to_string(s.blobs) +
                           (clustered ? " clustered" : " dispersed") + " blobs; relax the synthetic settings");
}

void validate_synth(const SynthSpec& s) {
  if (s.edge < 16) throw std::invalid_argument("synthetic edge must be at least 16");
  if (s.per_class < 1) throw std::invalid_argument("per_class must be positive");
  if (s.blobs < 1 || s.blob_radius < 1) throw std::invalid_argument("need at least one blob of radius >= 1");
  const double blob_area = s.blobs * std::numbers::pi * s.blob_radius * s.blob_radius;
  if (blob_area > static_cast<double>(s.edge) * s.edge) {
    throw std::invalid_argument("total blob area exceeds the image area");
  }
  if (2 * (s.cluster_radius + s.blob_radius) > s.edge - 1) {
    throw std::invalid_argument("cluster disc does not fit inside the image");
  }
  if (s.min_spread > s.edge - 1 - 2 * s.blob_radius) {
    throw std::invalid_argument("min_spread exceeds the usable image extent");
  }
}

constexpr std::array<double, 3> kBackground{232.0, 220.0, 236.0};
constexpr std::array<double, 3> kCore{72.0, 34.0, 118.0};
constexpr std::array<double, 3> kRim{146.0, 96.0, 170.0};
constexpr int kNoise = 10;

}  // namespace

SynthDataset synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  validate_synth(spec);
  SynthDataset ds;
  const int total = 2 * spec.per_class;
  const int e = spec.edge, r = spec.blob_radius;
  for (int i = 0; i < total; ++i) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const Label label = i % 2 == 0 ? Label::positive : Label::negative;
    const auto centers = place_blobs(spec, label == Label::positive, rng);

    std::vector<double> level(static_cast<std::size_t>(e) * e, -1.0);  // -1 = background
    for (const auto& c : centers) {
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          const int d2 = dy * dy + dx * dx;
          if (d2 > r * r) continue;
          level[static_cast<std::size_t>(c.y + dy) * e + (c.x + dx)] = std::sqrt(d2) / r;
        }
      }
    }
    RgbImage img(e, e);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(e) * e, 0);
    std::uniform_int_distribution<int> noise(-kNoise, kNoise);
    for (int y = 0; y < e; ++y) {
      for (int x = 0; x < e; ++x) {
        const double t = level[static_cast<std::size_t>(y) * e + x];
        if (t >= 0) mask[static_cast<std::size_t>(y) * e + x] = 1;
        for (int c = 0; c < 3; ++c) {
          const auto cc = static_cast<std::size_t>(c);
          const double base = t < 0 ? kBackground[cc] : kCore[cc] + t * (kRim[cc] - kCore[cc]);
          img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(base) + noise(rng), 0L, 255L));
        }
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05d", i);
    ds.images.push_back({std::move(img), label, id});
    ds.masks.push_back(std::move(mask));
  }
  return ds;
}

std::vector<double> intensity_histogram(const RgbImage& image, int bins) {
  if (bins < 1) throw std::invalid_argument("bins must be positive");
  check_image(image, "intensity_histogram");
  std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
  const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = (0.299 * image.pixels[i * 3] + 0.587 * image.pixels[i * 3 + 1] +
                      0.114 * image.pixels[i * 3 + 2]) / 256.0;
    const auto b = std::min(static_cast<std::size_t>(g * bins), static_cast<std::size_t>(bins - 1));
    h[b] += 1.0;
  }
  for (double& v : h) v /= static_cast<double>(n);
  return h;
}

void write_manifest(const fs::path& path, const std::vector<ManifestRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "id,path,label,fold\n";
  for (const auto& r : rows) {
    out << csv_field(r.id) << ',' << csv_field(r.path) << ',' << to_string(r.label) << ','
        << csv_field(r.fold) << '\n';
  }
}

std::vector<ManifestRow> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || parse_csv_line(line) != std::vector<std::string>{"id", "path", "label", "fold"}) {
    throw std::runtime_error("manifest " + path.string() + " lacks the header id,path,label,fold");
  }
  std::vector<ManifestRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto f = parse_csv_line(line);
    if (f.size() != 4) {
      throw std::runtime_error("manifest line " + std::to_string(line_no) + ": expected 4 fields");
    }
    rows.push_back({f[0], f[1], parse_label(f[2]), f[3]});
  }
  return rows;
}

std::vector<ManifestRow> manifest_rows(const FoldPlan& plan, const std::vector<LabeledImage>& images,
                                       const std::vector<std::string>& paths) {
  if (images.size() != paths.size()) throw std::invalid_argument("images and paths differ in length");
  std::map<std::string, std::string> fold_of;
  for (const auto& id : plan.test_ids) fold_of[id] = "test";
  for (int k = 0; k < kFoldCount; ++k) {
    for (const auto& id : plan.fold_ids[static_cast<std::size_t>(k)]) fold_of[id] = std::to_string(k + 1);
  }
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto it = fold_of.find(images[i].source_id);
    rows.push_back({images[i].source_id, paths[i], images[i].label,
                    it == fold_of.end() ? std::string() : it->second});
  }
  return rows;
}

void write_dataset(const fs::path& dir, const std::vector<LabeledImage>& images, const FoldPlan* plan) {
  std::vector<std::string> paths;
  for (const auto& img : images) {
    const std::string rel = to_string(img.label) + "/" + img.source_id + ".png";
    write_png(dir / rel, img.image);
    paths.push_back(rel);
  }
  write_manifest(dir / "manifest.csv", plan ? manifest_rows(*plan, images, paths)
                                            : manifest_rows(FoldPlan{}, images, paths));
}

}  // namespace msht
