#pragma once

#include <filesystem>

#include "reliscope/core.hpp"

namespace reliscope {

// Decodes a PNG or PPM/PGM file into unit-interval intensities.
// want_channels: 0 keeps the file's channel count (collapsed to 1 or 3),
// otherwise converts to the requested count (gray<->rgb).
// Decode failures raise InvalidInputError carrying the offending path.
ImageTensor read_image(const std::filesystem::path& path, int want_channels = 0);

// 8-bit PNG, grayscale or RGB depending on image.channels.
void write_png(const std::filesystem::path& path, const ImageTensor& image);

// 8-bit binary PGM of a saliency map, min-max scaled to [0,255].
// Constant maps are written as all zeros.
void write_pgm(const std::filesystem::path& path, const SaliencyMap& map);

// Bilinear resampling (half-pixel centers, edge clamped).
ImageTensor resize_bilinear(const ImageTensor& image, int out_h, int out_w);

ImageTensor to_channels(const ImageTensor& image, int want_channels);

}  // namespace reliscope
