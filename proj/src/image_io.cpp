#include "derain/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace derain {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Mirror index without repeating the edge sample: -1 -> 1, n -> n - 2.
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

unsigned char quantize8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::floor(c * 255.0f + 0.5f));
}

Tensor<float> read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ImageError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ImageError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ImageError("libpng initialization failed");
  }
  std::vector<unsigned char> pixels;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("corrupt PNG data in " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  if (stride != static_cast<std::size_t>(width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("unsupported PNG layout in " + path.string());
  }
  pixels.resize(stride * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<float> out(Shape{1, 3, static_cast<int>(height), static_cast<int>(width)});
  auto o = out.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) o[c * plane + p] = pixels[p * 3 + c] / 255.0f;
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor<float>& image) {
  const Shape s = image.shape();
  if (s.c != 1 && s.c != 3) {
    throw ShapeError("write_png needs 1 or 3 channels, got " + s.str());
  }
  const std::size_t plane = s.plane();
  std::vector<unsigned char> pixels(plane * 3);
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      const int src = s.c == 1 ? 0 : c;
      pixels[p * 3 + c] = quantize8(image.data()[src * plane + p]);
    }
  }
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw ImageError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw ImageError("libpng initialization failed");
  }
  std::vector<png_bytep> rows(s.h);
  for (int y = 0; y < s.h; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * s.w * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, s.w, s.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

template <typename T>
Tensor<T> crop_reflect(const Tensor<T>& x, int top, int left, int h, int w) {
  if (h < 1 || w < 1) throw ShapeError("crop size must be positive");
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, s.c, h, w});
  std::vector<int> cols(w);
  for (int xx = 0; xx < w; ++xx) cols[xx] = reflect(left + xx, s.w);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < h; ++y) {
        const T* src = x.ptr() + x.index(n, c, reflect(top + y, s.h), 0);
        T* dst = out.mutable_data().data() + out.index(n, c, y, 0);
        for (int xx = 0; xx < w; ++xx) dst[xx] = src[cols[xx]];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> pad_reflect_to_multiple(const Tensor<T>& x, int multiple) {
  if (multiple < 1) throw ParameterError("padding multiple must be >= 1");
  const Shape s = x.shape();
  const int h = (s.h + multiple - 1) / multiple * multiple;
  const int w = (s.w + multiple - 1) / multiple * multiple;
  if (h == s.h && w == s.w) return x;
  return crop_reflect(x, 0, 0, h, w);
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, int h, int w) {
  const Shape s = x.shape();
  if (h < 1 || w < 1 || h > s.h || w > s.w) {
    throw ShapeError("crop to " + std::to_string(h) + "x" + std::to_string(w) +
                     " does not fit " + s.str());
  }
  if (h == s.h && w == s.w) return x;
  return crop_reflect(x, 0, 0, h, w);
}

template Tensor<float> crop_reflect(const Tensor<float>&, int, int, int, int);
template Tensor<double> crop_reflect(const Tensor<double>&, int, int, int, int);
template Tensor<float> pad_reflect_to_multiple(const Tensor<float>&, int);
template Tensor<double> pad_reflect_to_multiple(const Tensor<double>&, int);
template Tensor<float> crop(const Tensor<float>&, int, int);
template Tensor<double> crop(const Tensor<double>&, int, int);

}  // namespace derain
