#pragma once

#include <string>

#include "saghog/image.hpp"

namespace saghog {

// Loaded page image; color is kept when the file has 3 or 4 channels.
struct LoadedImage {
  GrayImage gray;
  RgbImage rgb;
  bool has_color = false;
};

// PNG or PGM/PPM by extension (.png, .pgm, .ppm). Throws on unreadable files.
LoadedImage load_image(const std::string& path);

void save_png(const std::string& path, const GrayImage& img);
void save_png(const std::string& path, const RgbImage& img);
// Binarized and edge outputs are written as 0/255 grayscale PNG (ink black).
void save_png(const std::string& path, const BinaryImage& img);

void save_pgm(const std::string& path, const GrayImage& img);

}  // namespace saghog
