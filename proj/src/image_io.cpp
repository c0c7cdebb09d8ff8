#include "reliscope/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

namespace reliscope {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& why) {
  throw InvalidInputError("cannot read image '" + path.string() + "': " + why);
}

ImageTensor from_interleaved8(const std::vector<unsigned char>& px, int h, int w, int c) {
  ImageTensor img = ImageTensor::zeros(h, w, c);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at(ch, y, x) =
            static_cast<float>(px[static_cast<std::size_t>((y * w + x) * c + ch)]) / 255.0f;
  return img;
}

ImageTensor read_png_file(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) fail(path, "cannot open file");

  png_byte header[8];
  if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8))
    fail(path, "not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(path, "libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(path, "libpng init failed");
  }
  std::vector<unsigned char> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "corrupt PNG data");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  int channels = png_get_channels(png, info);
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "unsupported channel count after expansion");
  }
  pixels.resize(static_cast<std::size_t>(w) * h * static_cast<std::size_t>(channels));
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = pixels.data() + static_cast<std::size_t>(y) * w * static_cast<std::size_t>(channels);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  return from_interleaved8(pixels, static_cast<int>(h), static_cast<int>(w), channels);
}

void skip_pnm_whitespace(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      in.get();
    } else {
      return;
    }
  }
}

ImageTensor read_pnm_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open file");
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    fail(path, "not a binary PGM/PPM file");
  int channels = magic[1] == '6' ? 3 : 1;

  long vals[3];
  for (long& v : vals) {
    skip_pnm_whitespace(in);
    if (!(in >> v)) fail(path, "malformed PNM header");
  }
  long w = vals[0], h = vals[1], maxval = vals[2];
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) fail(path, "unsupported PNM header");
  in.get();  // single whitespace after maxval

  std::size_t count = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) *
                      static_cast<std::size_t>(channels);
  std::vector<unsigned char> px(count);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count) fail(path, "truncated PNM data");

  ImageTensor img = ImageTensor::zeros(static_cast<int>(h), static_cast<int>(w), channels);
  float scale = 1.0f / static_cast<float>(maxval);
  for (int ch = 0; ch < channels; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at(ch, y, x) =
            static_cast<float>(px[static_cast<std::size_t>((y * w + x) * channels + ch)]) * scale;
  return img;
}

unsigned char to_byte(float v) {
  float s = std::clamp(v, 0.0f, 1.0f) * 255.0f;
  return static_cast<unsigned char>(std::lround(s));
}

}  // namespace

ImageTensor read_image(const std::filesystem::path& path, int want_channels) {
  if (!std::filesystem::exists(path)) fail(path, "no such file");
  std::string ext = path.extension().string();
  for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  ImageTensor img;
  if (ext == ".png")
    img = read_png_file(path);
  else if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm")
    img = read_pnm_file(path);
  else
    fail(path, "unsupported extension '" + ext + "'");
  if (want_channels != 0 && want_channels != img.channels)
    img = to_channels(img, want_channels);
  return img;
}

ImageTensor to_channels(const ImageTensor& image, int want_channels) {
  if (want_channels == image.channels) return image;
  if (want_channels == 1 && image.channels == 3) {
    ImageTensor out = ImageTensor::zeros(image.height, image.width, 1);
    // Rec. 601 luma.
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x)
        out.at(0, y, x) = 0.299f * image.at(0, y, x) + 0.587f * image.at(1, y, x) +
                          0.114f * image.at(2, y, x);
    return out;
  }
  if (want_channels == 3 && image.channels == 1) {
    ImageTensor out = ImageTensor::zeros(image.height, image.width, 3);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(0, y, x);
    return out;
  }
  throw InvalidInputError("unsupported channel conversion");
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
  validate(image);
  FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw InvalidInputError("cannot open '" + path.string() + "' for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("PNG write failed for '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  int color = image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> row(static_cast<std::size_t>(image.width) *
                                 static_cast<std::size_t>(image.channels));
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < image.channels; ++c)
        row[static_cast<std::size_t>(x * image.channels + c)] = to_byte(image.at(c, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_pgm(const std::filesystem::path& path, const SaliencyMap& map) {
  float lo = map.values.empty() ? 0.0f : map.values[0];
  float hi = lo;
  for (float v : map.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  float span = hi - lo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot open '" + path.string() + "' for writing");
  out << "P5\n" << map.width << " " << map.height << "\n255\n";
  for (float v : map.values) {
    float s = span > 0.0f ? (v - lo) / span : 0.0f;
    out.put(static_cast<char>(to_byte(s)));
  }
}

ImageTensor resize_bilinear(const ImageTensor& image, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw InvalidInputError("resize target must be positive");
  if (out_h == image.height && out_w == image.width) return image;
  ImageTensor out = ImageTensor::zeros(out_h, out_w, image.channels);
  double sy = static_cast<double>(image.height) / out_h;
  double sx = static_cast<double>(image.width) / out_w;
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < out_h; ++y) {
      double fy = (y + 0.5) * sy - 0.5;
      int y0 = static_cast<int>(std::floor(fy));
      double wy = fy - y0;
      int y0c = std::clamp(y0, 0, image.height - 1);
      int y1c = std::clamp(y0 + 1, 0, image.height - 1);
      for (int x = 0; x < out_w; ++x) {
        double fx = (x + 0.5) * sx - 0.5;
        int x0 = static_cast<int>(std::floor(fx));
        double wx = fx - x0;
        int x0c = std::clamp(x0, 0, image.width - 1);
        int x1c = std::clamp(x0 + 1, 0, image.width - 1);
        double top = (1.0 - wx) * image.at(c, y0c, x0c) + wx * image.at(c, y0c, x1c);
        double bot = (1.0 - wx) * image.at(c, y1c, x0c) + wx * image.at(c, y1c, x1c);
        out.at(c, y, x) = static_cast<float>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

}  // namespace reliscope
