#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tsar/model.hpp"
#include "tsar/tensor.hpp"

namespace tsar {

// Images are (1,C,H,W) tensors with values in [0,1]. Per class, images are
// stored train split first, then test split, then anything else (the pool).
struct ImageDataset {
  InShape in;
  std::vector<std::string> class_names;
  std::vector<std::vector<Tensor>> images;
  int train_per_class = 0;
  int test_per_class = 0;

  std::size_t num_classes() const noexcept { return images.size(); }
  std::size_t min_class_size() const;
  // Keeps only the listed classes, in the given order.
  ImageDataset subset(const std::vector<int>& classes) const;
};

// A sample refers to an image by class and position within that class.
struct Sample {
  int cls = 0;
  int index = 0;
  bool operator==(const Sample&) const = default;
};

const Tensor& image_of(const ImageDataset& ds, Sample s);

enum class GlyphStyle { kStrokes, kBlobs };
const char* glyph_style_name(GlyphStyle s);
GlyphStyle parse_glyph_style(const std::string& s);

struct GlyphSpec {
  int num_classes = 25;
  int per_class = 20;
  InShape in;
  GlyphStyle style = GlyphStyle::kStrokes;
  double noise = 0.05;
};

// Each class is a random template; instances are jittered, rotated, scaled
// and noised renderings of it.
ImageDataset synthetic_glyphs(const GlyphSpec& spec, std::uint64_t seed);

// Held-out accuracy of a linear (ridge) probe fit on the first `train`
// images of each class and tested on the rest.
double linear_probe_accuracy(const ImageDataset& ds, int train);

enum class ResizeMode { kBilinear, kNearest };

// (C,h,w) planar source in [0,1] resized to `out` channels/size.
Tensor resize_image(const std::vector<double>& planar, int channels, int h, int w, const InShape& out,
                    ResizeMode mode);

struct FolderSpec {
  InShape in;
  ResizeMode resize = ResizeMode::kBilinear;
  int min_per_class = 1;
  int train_per_class = 0;
  int test_per_class = 0;
};

struct FolderLoadReport {
  std::vector<std::string> excluded;  // classes dropped for having too few images
};

// One subfolder per class, read in lexicographic order. PNG, PPM and PGM
// files are accepted; other files are ignored.
ImageDataset load_image_folder(const std::string& path, const FolderSpec& spec, FolderLoadReport* report = nullptr);

// Decoded image, planar channels in [0,1].
struct RawImage {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> planar;
};
RawImage read_image_file(const std::string& path);
void write_png(const std::string& path, const Tensor& image);

}  // namespace tsar
