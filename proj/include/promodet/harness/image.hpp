#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "promodet/errors.hpp"
#include "promodet/nn/tensor.hpp"

namespace promodet::harness {

// Planar RGB image, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // 3 x height x width

  Image() = default;
  Image(int w, int h, float fill = 0.f)
      : width(w), height(h), data(static_cast<std::size_t>(3) * w * h, fill) {}

  float& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

// Bilinear resize, half-pixel centers.
inline Image resize(const Image& src, int w, int h) {
  Image out(w, h);
  const double sx = static_cast<double>(src.width) / w;
  const double sy = static_cast<double>(src.height) / h;
  for (int y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double ly = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double lx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - lx) * src.at(c, y0, x0) + lx * src.at(c, y0, x1);
        const double bot = (1 - lx) * src.at(c, y1, x0) + lx * src.at(c, y1, x1);
        out.at(c, y, x) = static_cast<float>((1 - ly) * top + ly * bot);
      }
    }
  }
  return out;
}

// Packs images of identical size into an (N, 3, H, W) batch.
template <typename T = float>
nn::Tensor<T> to_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("to_batch: no images");
  const int w = images[0]->width, h = images[0]->height;
  nn::Tensor<T> t({static_cast<int>(images.size()), 3, h, w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->width != w || images[i]->height != h) {
      throw ShapeError("to_batch: images differ in size");
    }
    std::transform(images[i]->data.begin(), images[i]->data.end(),
                   t.image(static_cast<int>(i)), [](float v) { return static_cast<T>(v); });
  }
  return t;
}

namespace detail {

inline Image from_interleaved(const unsigned char* px, int w, int h, int channels) {
  Image img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const unsigned char* p = px + (static_cast<std::size_t>(y) * w + x) * channels;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = p[channels == 1 ? 0 : c] / 255.f;
    }
  }
  return img;
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P6" || w <= 0 || h <= 0 || maxval != 255) {
    throw IoError(path + ": not a binary 8-bit PPM");
  }
  in.get();
  std::vector<unsigned char> px(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!in) throw IoError(path + ": truncated PPM");
  return from_interleaved(px.data(), w, h, 3);
}

inline Image read_png(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError(path + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> px(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr)) {
    throw IoError(path + ": " + img.message);
  }
  return from_interleaved(px.data(), static_cast<int>(img.width), static_cast<int>(img.height), 3);
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline Image read_jpeg(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError(path + ": cannot open");
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  std::vector<unsigned char> px;
  int w = 0, h = 0;
  cinfo.err = jpeg_std_error(&err.mgr);
  // The default handler exits the process.
  err.mgr.error_exit = [](j_common_ptr c) {
    auto* e = reinterpret_cast<JpegError*>(c->err);
    (*c->err->format_message)(c, e->message);
    std::longjmp(e->jump, 1);
  };
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    throw IoError(path + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  w = static_cast<int>(cinfo.output_width);
  h = static_cast<int>(cinfo.output_height);
  px.resize(static_cast<std::size_t>(w) * h * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = px.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(f);
  return from_interleaved(px.data(), w, h, 3);
}

inline std::string lower_ext(const std::string& path) {
  const auto dot = path.find_last_of('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

}  // namespace detail

inline Image read_image(const std::string& path) {
  const std::string ext = detail::lower_ext(path);
  if (ext == "png") return detail::read_png(path);
  if (ext == "jpg" || ext == "jpeg") return detail::read_jpeg(path);
  if (ext == "ppm") return detail::read_ppm(path);
  throw IoError(path + ": unsupported image format (png, jpg, ppm)");
}

inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot write");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.f, 1.f);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255))));
      }
    }
  }
}

}  // namespace promodet::harness
