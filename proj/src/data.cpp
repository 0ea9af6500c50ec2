#include "tsar/data.hpp"

#include <png.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>

#include "tsar/error.hpp"

namespace tsar {
namespace fs = std::filesystem;

std::size_t ImageDataset::min_class_size() const {
  std::size_t m = images.empty() ? 0 : images[0].size();
  for (const auto& c : images) m = std::min(m, c.size());
  return m;
}

ImageDataset ImageDataset::subset(const std::vector<int>& classes) const {
  ImageDataset out;
  out.in = in;
  out.train_per_class = train_per_class;
  out.test_per_class = test_per_class;
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= images.size()) {
      fail(ErrorKind::kInvalidArgument, "class index " + std::to_string(c) + " out of range");
    }
    out.class_names.push_back(class_names[static_cast<std::size_t>(c)]);
    out.images.push_back(images[static_cast<std::size_t>(c)]);
  }
  return out;
}

const Tensor& image_of(const ImageDataset& ds, Sample s) {
  return ds.images.at(static_cast<std::size_t>(s.cls)).at(static_cast<std::size_t>(s.index));
}

const char* glyph_style_name(GlyphStyle s) { return s == GlyphStyle::kStrokes ? "strokes" : "blobs"; }

GlyphStyle parse_glyph_style(const std::string& s) {
  if (s == "strokes") return GlyphStyle::kStrokes;
  if (s == "blobs") return GlyphStyle::kBlobs;
  fail(ErrorKind::kConfig, "unknown glyph style '" + s + "' (strokes, blobs)");
}

namespace {

struct Pt {
  double x, y;
};

struct Stroke {
  Pt p0, p1, p2;  // quadratic Bezier control points
  double width;
};

struct Blob {
  Pt c;
  double r;
  double rgb[3];
};

struct Template {
  std::vector<Stroke> strokes;
  std::vector<Blob> blobs;
  double bg[3] = {0, 0, 0};
};

struct Jitter {
  double angle, scale, dx, dy;
  Pt apply(Pt p) const {
    const double x = p.x - 0.5, y = p.y - 0.5;
    const double c = std::cos(angle), s = std::sin(angle);
    return {0.5 + scale * (c * x - s * y) + dx, 0.5 + scale * (s * x + c * y) + dy};
  }
};

double seg_dist(Pt p, Pt a, Pt b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = p.x - a.x, wy = p.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? (wx * vx + wy * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

Template make_template(GlyphStyle style, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Template t;
  if (style == GlyphStyle::kStrokes) {
    const int n = 3 + static_cast<int>(u(rng) * 3.0);
    for (int i = 0; i < n; ++i) {
      auto pt = [&] { return Pt{0.15 + 0.7 * u(rng), 0.15 + 0.7 * u(rng)}; };
      t.strokes.push_back(Stroke{pt(), pt(), pt(), 0.05 + 0.03 * u(rng)});
    }
  } else {
    for (double& c : t.bg) c = 0.1 + 0.3 * u(rng);
    const int n = 3 + static_cast<int>(u(rng) * 2.0);
    for (int i = 0; i < n; ++i) {
      Blob b{{0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng)}, 0.08 + 0.1 * u(rng), {u(rng), u(rng), u(rng)}};
      t.blobs.push_back(b);
    }
  }
  return t;
}

void render(const Template& t, const GlyphSpec& spec, std::mt19937_64& rng, Tensor& out) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  const Jitter j{u(rng) * 12.0 * std::numbers::pi / 180.0, 1.0 + 0.1 * u(rng), 0.06 * u(rng), 0.06 * u(rng)};
  const std::int64_t C = spec.in.channels, H = spec.in.height, W = spec.in.width;
  std::vector<double> rgb(static_cast<std::size_t>(3 * H * W));
  auto at = [&](int c, std::int64_t y, std::int64_t x) -> double& {
    return rgb[static_cast<std::size_t>((c * H + y) * W + x)];
  };
  if (!t.strokes.empty()) {
    constexpr int kSegs = 16;
    std::vector<std::pair<Pt, Pt>> segs;
    std::vector<double> widths;
    for (const Stroke& s : t.strokes) {
      auto jit = [&](Pt p) { return j.apply(Pt{p.x + 0.015 * n01(rng), p.y + 0.015 * n01(rng)}); };
      const Pt a = jit(s.p0), b = jit(s.p1), c = jit(s.p2);
      const double w = s.width * (1.0 + 0.15 * u(rng));
      Pt prev = a;
      for (int k = 1; k <= kSegs; ++k) {
        const double tt = static_cast<double>(k) / kSegs;
        const Pt p{(1 - tt) * (1 - tt) * a.x + 2 * (1 - tt) * tt * b.x + tt * tt * c.x,
                   (1 - tt) * (1 - tt) * a.y + 2 * (1 - tt) * tt * b.y + tt * tt * c.y};
        segs.emplace_back(prev, p);
        widths.push_back(w);
        prev = p;
      }
    }
    const double soft = 1.0 / static_cast<double>(H);
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        const Pt p{(static_cast<double>(x) + 0.5) / static_cast<double>(W),
                   (static_cast<double>(y) + 0.5) / static_cast<double>(H)};
        double ink = 0.0;
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const double d = seg_dist(p, segs[s].first, segs[s].second) - widths[s] / 2;
          ink = std::max(ink, std::clamp(1.0 - d / soft, 0.0, 1.0));
        }
        for (int c = 0; c < 3; ++c) at(c, y, x) = ink;
      }
    }
  } else {
    double bg[3];
    for (int c = 0; c < 3; ++c) bg[c] = std::clamp(t.bg[c] + 0.05 * u(rng), 0.0, 1.0);
    std::vector<Blob> blobs = t.blobs;
    for (Blob& b : blobs) {
      b.c = j.apply(Pt{b.c.x + 0.02 * n01(rng), b.c.y + 0.02 * n01(rng)});
      b.r *= j.scale * (1.0 + 0.1 * u(rng));
      for (double& v : b.rgb) v = std::clamp(v + 0.05 * u(rng), 0.0, 1.0);
    }
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        const Pt p{(static_cast<double>(x) + 0.5) / static_cast<double>(W),
                   (static_cast<double>(y) + 0.5) / static_cast<double>(H)};
        double px[3] = {bg[0], bg[1], bg[2]};
        for (const Blob& b : blobs) {
          const double dx = p.x - b.c.x, dy = p.y - b.c.y;
          const double a = std::exp(-(dx * dx + dy * dy) / (2 * b.r * b.r));
          for (int c = 0; c < 3; ++c) px[c] = (1 - a) * px[c] + a * b.rgb[c];
        }
        for (int c = 0; c < 3; ++c) at(c, y, x) = px[c];
      }
    }
  }
  out = Tensor(spec.in.batch_shape());
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t i = 0; i < H * W; ++i) {
      double v;
      if (C == 3) {
        v = rgb[static_cast<std::size_t>(c * H * W + i)];
      } else {
        v = (rgb[static_cast<std::size_t>(i)] + rgb[static_cast<std::size_t>(H * W + i)] +
             rgb[static_cast<std::size_t>(2 * H * W + i)]) / 3.0;
      }
      out[c * H * W + i] = std::clamp(v + spec.noise * n01(rng), 0.0, 1.0);
    }
  }
}

}  // namespace

ImageDataset synthetic_glyphs(const GlyphSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 1 || spec.per_class < 1) fail(ErrorKind::kConfig, "synthetic_glyphs: empty dataset requested");
  if (spec.in.channels != 1 && spec.in.channels != 3) fail(ErrorKind::kConfig, "synthetic_glyphs: channels must be 1 or 3");
  std::mt19937_64 rng(seed);
  ImageDataset ds;
  ds.in = spec.in;
  if (spec.per_class >= 20) {
    ds.train_per_class = 15;
    ds.test_per_class = 5;
  }
  for (int k = 0; k < spec.num_classes; ++k) {
    const Template t = make_template(spec.style, rng);
    std::mt19937_64 inst(rng());
    ds.class_names.push_back(std::string(glyph_style_name(spec.style)) + "_" + std::to_string(k));
    std::vector<Tensor> imgs(static_cast<std::size_t>(spec.per_class));
    for (Tensor& img : imgs) render(t, spec, inst, img);
    ds.images.push_back(std::move(imgs));
  }
  return ds;
}

double linear_probe_accuracy(const ImageDataset& ds, int train) {
  const std::size_t k = ds.num_classes();
  if (k < 2) fail(ErrorKind::kInvalidArgument, "linear probe needs at least two classes");
  if (static_cast<std::size_t>(train) >= ds.min_class_size()) {
    fail(ErrorKind::kInvalidArgument, "linear probe needs held-out images in every class");
  }
  const Eigen::Index d = ds.in.numel();
  std::vector<const Tensor*> tr, te;
  std::vector<int> ytr, yte;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < ds.images[c].size(); ++i) {
      (static_cast<int>(i) < train ? tr : te).push_back(&ds.images[c][i]);
      (static_cast<int>(i) < train ? ytr : yte).push_back(static_cast<int>(c));
    }
  }
  auto rows = [&](const std::vector<const Tensor*>& v) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), d + 1);
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (Eigen::Index j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), j) = (*v[i])[j];
      m(static_cast<Eigen::Index>(i), d) = 1.0;
    }
    return m;
  };
  const Eigen::MatrixXd X = rows(tr), Xt = rows(te);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(X.rows(), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < ytr.size(); ++i) Y(static_cast<Eigen::Index>(i), ytr[i]) = 1.0;
  // Ridge regression onto one-hot targets, solved in the dual.
  Eigen::MatrixXd G = X * X.transpose();
  const double lambda = 1e-3 * G.trace() / static_cast<double>(G.rows());
  G.diagonal().array() += lambda;
  const Eigen::MatrixXd W = X.transpose() * G.ldlt().solve(Y);
  const Eigen::MatrixXd scores = Xt * W;
  int correct = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index arg;
    scores.row(i).maxCoeff(&arg);
    if (arg == yte[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.rows());
}

Tensor resize_image(const std::vector<double>& planar, int channels, int h, int w, const InShape& out,
                    ResizeMode mode) {
  if (channels < 1 || h < 1 || w < 1 || planar.size() != static_cast<std::size_t>(channels) * h * w) {
    fail(ErrorKind::kFormat, "resize: bad source image");
  }
  const std::int64_t H = out.height, W = out.width;
  Tensor t(out.batch_shape());
  auto src = [&](int c, int y, int x) { return planar[(static_cast<std::size_t>(c) * h + y) * w + x]; };
  auto channel_value = [&](int oc, int y, int x) {
    if (channels >= 3 && out.channels == 3) return src(oc, y, x);
    if (channels >= 3) return (src(0, y, x) + src(1, y, x) + src(2, y, x)) / 3.0;
    return src(0, y, x);  // grayscale replicated
  };
  const double sy = static_cast<double>(h) / static_cast<double>(H);
  const double sx = static_cast<double>(w) / static_cast<double>(W);
  for (int c = 0; c < out.channels; ++c) {
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        double v;
        if (mode == ResizeMode::kNearest) {
          const int iy = std::min(h - 1, static_cast<int>(std::floor((static_cast<double>(y) + 0.5) * sy)));
          const int ix = std::min(w - 1, static_cast<int>(std::floor((static_cast<double>(x) + 0.5) * sx)));
          v = channel_value(c, iy, ix);
        } else {
          const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
          const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
          const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
          const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          const double ay = fy - y0, ax = fx - x0;
          v = (1 - ay) * ((1 - ax) * channel_value(c, y0, x0) + ax * channel_value(c, y0, x1)) +
              ay * ((1 - ax) * channel_value(c, y1, x0) + ax * channel_value(c, y1, x1));
        }
        t[(c * H + y) * W + x] = v;
      }
    }
  }
  return t;
}

namespace {

RawImage read_png(const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    fail(ErrorKind::kFormat, path + ": " + img.message);
  }
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    fail(ErrorKind::kFormat, path + ": " + img.message);
  }
  RawImage r;
  r.channels = color ? 3 : 1;
  r.height = static_cast<int>(img.height);
  r.width = static_cast<int>(img.width);
  r.planar.resize(buf.size());
  const std::size_t hw = static_cast<std::size_t>(r.height) * r.width;
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < r.channels; ++c) r.planar[c * hw + i] = buf[i * r.channels + c] / 255.0;
  return r;
}

RawImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, path + ": cannot open");
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t.push_back(ch);
      }
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") fail(ErrorKind::kFormat, path + ": not a PNM file");
  RawImage r;
  r.channels = (magic == "P3" || magic == "P6") ? 3 : 1;
  int maxval = 0;
  try {
    r.width = std::stoi(token());
    r.height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    fail(ErrorKind::kFormat, path + ": bad PNM header");
  }
  if (r.width < 1 || r.height < 1 || maxval < 1 || maxval > 65535) fail(ErrorKind::kFormat, path + ": bad PNM header");
  const std::size_t hw = static_cast<std::size_t>(r.height) * r.width;
  const std::size_t n = hw * r.channels;
  std::vector<double> interleaved(n);
  if (magic == "P5" || magic == "P6") {
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(n * bytes);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
      fail(ErrorKind::kFormat, path + ": truncated PNM data");
    }
    for (std::size_t i = 0; i < n; ++i) {
      const int v = bytes == 2 ? (raw[2 * i] << 8) | raw[2 * i + 1] : raw[i];
      interleaved[i] = static_cast<double>(v) / maxval;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const std::string t = token();
      if (t.empty()) fail(ErrorKind::kFormat, path + ": truncated PNM data");
      interleaved[i] = std::stod(t) / maxval;
    }
  }
  r.planar.resize(n);
  for (std::size_t i = 0; i < hw; ++i)
    for (int c = 0; c < r.channels; ++c) r.planar[c * hw + i] = interleaved[i * r.channels + c];
  return r;
}

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

}  // namespace

RawImage read_image_file(const std::string& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_pnm(path);
  fail(ErrorKind::kFormat, path + ": unsupported image type");
}

void write_png(const std::string& path, const Tensor& image) {
  if (image.rank() != 4 || image.dim(0) != 1) fail(ErrorKind::kShape, "write_png: expected (1,C,H,W)");
  const int c = static_cast<int>(image.dim(1)), h = static_cast<int>(image.dim(2)), w = static_cast<int>(image.dim(3));
  if (c != 1 && c != 3) fail(ErrorKind::kShape, "write_png: channels must be 1 or 3");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<png_byte> buf(hw * c);
  for (std::size_t i = 0; i < hw; ++i)
    for (int k = 0; k < c; ++k)
      buf[i * c + k] = static_cast<png_byte>(std::lround(std::clamp(image[static_cast<std::int64_t>(k * hw + i)], 0.0, 1.0) * 255.0));
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    fail(ErrorKind::kIo, path + ": " + img.message);
  }
}

ImageDataset load_image_folder(const std::string& path, const FolderSpec& spec, FolderLoadReport* report) {
  if (!fs::is_directory(path)) fail(ErrorKind::kIo, "dataset folder not found: " + path);
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  const int need = std::max(spec.min_per_class, spec.train_per_class + spec.test_per_class);
  ImageDataset ds;
  ds.in = spec.in;
  ds.train_per_class = spec.train_per_class;
  ds.test_per_class = spec.test_per_class;
  for (const fs::path& d : dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(d)) {
      const std::string ext = lower_ext(e.path());
      if (e.is_regular_file() && (ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm")) {
        files.push_back(e.path());
      }
    }
    std::sort(files.begin(), files.end());
    if (static_cast<int>(files.size()) < need) {
      std::cerr << "warning: class " << d.filename().string() << " has " << files.size() << " images (< " << need
                << "), excluded\n";
      if (report) report->excluded.push_back(d.filename().string());
      continue;
    }
    std::vector<Tensor> imgs;
    for (const fs::path& f : files) {
      const RawImage r = read_image_file(f.string());
      imgs.push_back(resize_image(r.planar, r.channels, r.height, r.width, spec.in, spec.resize));
    }
    ds.class_names.push_back(d.filename().string());
    ds.images.push_back(std::move(imgs));
  }
  if (ds.images.empty()) fail(ErrorKind::kIo, "no usable classes in " + path);
  return ds;
}

}  // namespace tsar
