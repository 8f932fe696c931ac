#pragma once

#include <filesystem>
#include <stdexcept>

#include "derain/tensor.hpp"

namespace derain {

/// Unreadable, undecodable or unwritable image files.
class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decodes an 8-bit or 16-bit PNG to a (1, 3, H, W) tensor in [0, 1].
/// Gray, palette and alpha inputs are converted to RGB.
Tensor<float> read_png(const std::filesystem::path& path);

/// Writes the first image of `image` (C = 1 or 3) as 8-bit PNG. Values are
/// clamped to [0, 1] and quantized round-half-up.
void write_png(const std::filesystem::path& path, const Tensor<float>& image);

/// Round-half-up 8-bit quantization of a [0, 1] value.
unsigned char quantize8(float v);

/// Reflect-pads H and W up to the next multiple of `multiple`.
template <typename T>
Tensor<T> pad_reflect_to_multiple(const Tensor<T>& x, int multiple);

/// Top-left crop to h x w.
template <typename T>
Tensor<T> crop(const Tensor<T>& x, int h, int w);

/// Reflect-pads (or passes through) and then takes an h x w window at
/// (top, left) of the padded image.
template <typename T>
Tensor<T> crop_reflect(const Tensor<T>& x, int top, int left, int h, int w);

}  // namespace derain
