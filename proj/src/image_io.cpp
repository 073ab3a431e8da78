#include "ivpt/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <vector>

namespace ivpt {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

}  // namespace

void write_png(const std::string& path, const Array& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) {
    throw std::invalid_argument("write_png: expected [3,H,W]");
  }
  const int64_t h = image.dim(1), w = image.dim(2);

  std::vector<png_byte> pixels(static_cast<size_t>(h * w * 3));
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < h * w; ++i) {
      real v = image[c * h * w + i];
      v = v < 0 ? 0 : (v > 1 ? 1 : v);
      pixels[static_cast<size_t>(i * 3 + c)] = static_cast<png_byte>(std::lround(v * 255.0));
    }
  }
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = pixels.data() + y * w * 3;

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail(path, "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(path, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail(path, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(path, "libpng write error");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Array read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail(path, "cannot open");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    fail(path, "not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(path, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(path, "png_create_info_struct failed");
  }
  std::vector<png_byte> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "libpng decode error");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  // Normalize every input variant to 8-bit RGB.
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const int64_t w = png_get_image_width(png, info);
  const int64_t h = png_get_image_height(png, info);
  if (png_get_rowbytes(png, info) != static_cast<size_t>(w * 3)) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "unexpected row layout after decode transforms");
  }
  pixels.resize(static_cast<size_t>(h * w * 3));
  rows.resize(static_cast<size_t>(h));
  for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = pixels.data() + y * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Array out({3, h, w});
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < h * w; ++i) {
      out[c * h * w + i] = pixels[static_cast<size_t>(i * 3 + c)] / real(255);
    }
  }
  return out;
}

void write_npy_int64(const std::string& path, const IntArray& a) {
  std::string shape = "(";
  for (size_t i = 0; i < a.shape().size(); ++i) {
    if (i) shape += ", ";
    shape += std::to_string(a.shape()[i]);
  }
  if (a.shape().size() == 1) shape += ",";
  shape += ")";
  std::string header = "{'descr': '<i8', 'fortran_order': False, 'shape': " + shape + ", }";
  const size_t unpadded = 10 + header.size() + 1;  // magic+version+len + header + '\n'
  const size_t padded = (unpadded + 63) / 64 * 64;
  header.append(padded - unpadded, ' ');
  header += '\n';

  std::ofstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open for writing");
  const char magic[8] = {'\x93', 'N', 'U', 'M', 'P', 'Y', 1, 0};
  f.write(magic, 8);
  const uint16_t hlen = static_cast<uint16_t>(header.size());
  const char lenb[2] = {static_cast<char>(hlen & 0xff), static_cast<char>(hlen >> 8)};
  f.write(lenb, 2);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  f.write(reinterpret_cast<const char*>(a.data()),
          static_cast<std::streamsize>(a.numel() * sizeof(int64_t)));
  if (!f) fail(path, "write failed");
}

IntArray read_npy_int64(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open");
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "\x93NUMPY", 6) != 0) fail(path, "not an npy file");
  if (magic[6] != 1) fail(path, "unsupported npy version");
  char lenb[2];
  f.read(lenb, 2);
  const uint16_t hlen = static_cast<uint16_t>(static_cast<unsigned char>(lenb[0]) |
                                              (static_cast<unsigned char>(lenb[1]) << 8));
  std::string header(hlen, '\0');
  f.read(header.data(), hlen);
  if (!f) fail(path, "truncated header");
  if (header.find("'<i8'") == std::string::npos) fail(path, "expected int64 payload");
  if (header.find("'fortran_order': False") == std::string::npos) fail(path, "expected C order");

  const size_t open = header.find('(');
  const size_t close = header.find(')', open);
  if (open == std::string::npos || close == std::string::npos) fail(path, "malformed shape");
  Shape shape;
  size_t pos = open + 1;
  while (pos < close) {
    size_t next = header.find(',', pos);
    if (next == std::string::npos || next > close) next = close;
    const std::string tok = header.substr(pos, next - pos);
    if (tok.find_first_of("0123456789") != std::string::npos) {
      shape.push_back(std::stoll(tok));
    }
    pos = next + 1;
  }
  IntArray out(shape);
  f.read(reinterpret_cast<char*>(out.data()),
         static_cast<std::streamsize>(out.numel() * sizeof(int64_t)));
  if (!f) fail(path, "truncated payload");
  return out;
}

}  // namespace ivpt
