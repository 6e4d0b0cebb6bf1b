#include "uacount/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "uacount/errors.hpp"

namespace uacount {

namespace fs = std::filesystem;

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
int header_int(std::istream& in, const fs::path& path) {
  std::string tok;
  while (in >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    try {
      return std::stoi(tok);
    } catch (const std::exception&) {
      break;
    }
  }
  throw DataError("malformed image header in " + path.string());
}

}  // namespace

void write_pgm16(const fs::path& path, const Grid& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  out << "P5\n" << image.cols() << ' ' << image.rows() << "\n65535\n";
  std::vector<unsigned char> buf(image.size() * 2);
  for (Eigen::Index i = 0; i < image.size(); ++i) {
    const double v = std::clamp(image.data()[i], 0.0, 1.0);
    const auto q = static_cast<unsigned>(std::lround(v * 65535.0));
    buf[2 * i] = static_cast<unsigned char>(q >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("failed writing image " + path.string());
}

Grid read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw DataError("not a binary PGM: " + path.string());
  const int w = header_int(in, path);
  const int h = header_int(in, path);
  const int maxval = header_int(in, path);
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw DataError("bad PGM dimensions in " + path.string());
  in.get();
  const int bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * bytes);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw DataError("truncated PGM payload in " + path.string());
  }
  Grid g(h, w);
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const unsigned v = bytes == 2 ? (unsigned{buf[2 * i]} << 8) | buf[2 * i + 1] : buf[i];
    g.data()[i] = static_cast<double>(v) / maxval;
  }
  return g;
}

void write_ppm(const fs::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size() * sizeof(Rgb)));
  if (!out) throw DataError("failed writing image " + path.string());
}

RgbImage read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DataError("not a binary PPM: " + path.string());
  RgbImage img;
  img.width = header_int(in, path);
  img.height = header_int(in, path);
  if (header_int(in, path) != 255) throw DataError("only 8-bit PPM supported: " + path.string());
  in.get();
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()),
               static_cast<std::streamsize>(img.pixels.size() * sizeof(Rgb)))) {
    throw DataError("truncated PPM payload in " + path.string());
  }
  return img;
}

Rgb colormap_jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto channel = [v](double centre) {
    const double x = 1.5 - std::abs(4.0 * v - centre);
    return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0)));
  };
  return {channel(3.0), channel(2.0), channel(1.0)};
}

RgbImage render_colormap(const Grid& values, double lo, double hi) {
  RgbImage img{static_cast<int>(values.rows()), static_cast<int>(values.cols()), {}};
  img.pixels.reserve(values.size());
  const double span = hi - lo;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double t = span > 0.0 ? (values.data()[i] - lo) / span : 0.0;
    img.pixels.push_back(colormap_jet(t));
  }
  return img;
}

RgbImage render_binary(const Grid& values) {
  RgbImage img{static_cast<int>(values.rows()), static_cast<int>(values.cols()), {}};
  img.pixels.reserve(values.size());
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    img.pixels.push_back(values.data()[i] > 0.5 ? Rgb{255, 255, 255} : Rgb{0, 0, 0});
  }
  return img;
}

}  // namespace uacount
