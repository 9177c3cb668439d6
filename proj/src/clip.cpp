#include "mamat/clip.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

namespace mamat {

namespace fs = std::filesystem;

VideoClip::VideoClip(Tensor<float> frames) : data(std::move(frames)) {
  if (data.rank() != 4) throw ShapeError("a clip is F x C x H x W, got " + shape_str(data.shape()));
}

VideoClip::VideoClip(std::size_t frames, std::size_t channels, std::size_t height, std::size_t width)
    : data({frames, channels, height, width}, 0.0f) {}

Tensor<float> VideoClip::frame(std::size_t i) const {
  if (i >= frames()) throw std::out_of_range("frame index " + std::to_string(i));
  const std::size_t n = frame_size();
  return Tensor<float>({channels(), height(), width()},
                       std::vector<float>(data.ptr() + i * n, data.ptr() + (i + 1) * n));
}

void VideoClip::set_frame(std::size_t i, const Tensor<float>& frame) {
  if (i >= frames()) throw std::out_of_range("frame index " + std::to_string(i));
  if (frame.shape() != Shape{channels(), height(), width()}) {
    throw ShapeError("frame shape " + shape_str(frame.shape()) + " does not fit clip");
  }
  std::copy(frame.ptr(), frame.ptr() + frame.size(), data.ptr() + i * frame_size());
}

float& VideoClip::at(std::size_t f, std::size_t c, std::size_t y, std::size_t x) {
  return data[((f * channels() + c) * height() + y) * width() + x];
}

float VideoClip::at(std::size_t f, std::size_t c, std::size_t y, std::size_t x) const {
  return data[((f * channels() + c) * height() + y) * width() + x];
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& is, const fs::path& path) {
  std::string tok;
  while (tok.empty()) {
    const int ch = is.get();
    if (ch == EOF) throw IoError(path.string() + ": truncated header");
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
    } else if (!std::isspace(ch)) {
      tok.push_back(char(ch));
      while (is.peek() != EOF && !std::isspace(is.peek())) tok.push_back(char(is.get()));
    }
  }
  return tok;
}

std::size_t header_number(std::istream& is, const fs::path& path) {
  const auto tok = header_token(is, path);
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(tok, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != tok.size() || tok.empty()) throw IoError(path.string() + ": bad header field '" + tok + "'");
  return v;
}

}  // namespace

Tensor<float> read_pnm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const auto magic = header_token(is, path);
  std::size_t channels = 0;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw IoError(path.string() + ": not a binary PGM/PPM file");
  }
  const std::size_t w = header_number(is, path), h = header_number(is, path), maxval = header_number(is, path);
  if (w == 0 || h == 0) throw IoError(path.string() + ": empty image");
  if (maxval != 255) throw IoError(path.string() + ": only 8-bit images are supported");
  is.get();  // single whitespace before the raster
  std::vector<unsigned char> raster(w * h * channels);
  is.read(reinterpret_cast<char*>(raster.data()), std::streamsize(raster.size()));
  if (std::size_t(is.gcount()) != raster.size()) throw IoError(path.string() + ": truncated raster");
  Tensor<float> frame({channels, h, w}, 0.0f);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        frame[(c * h + y) * w + x] = float(raster[(y * w + x) * channels + c]) / 255.0f;
      }
  return frame;
}

void write_pnm(const fs::path& path, const Tensor<float>& frame) {
  if (frame.rank() != 3 || (frame.dim(0) != 1 && frame.dim(0) != 3)) {
    throw ShapeError("write_pnm expects 1 x H x W or 3 x H x W, got " + shape_str(frame.shape()));
  }
  const std::size_t channels = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
  std::vector<unsigned char> raster(w * h * channels);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const float v = std::clamp(frame[(c * h + y) * w + x], 0.0f, 1.0f);
        raster[(y * w + x) * channels + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << (channels == 1 ? "P5" : "P6") << '\n' << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(raster.data()), std::streamsize(raster.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

std::string frame_file_name(std::size_t index, std::size_t channels) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%05zu.%s", index, channels == 3 ? "ppm" : "pgm");
  return buf;
}

nlohmann::json read_manifest(const fs::path& dir) {
  std::ifstream is(dir / kManifestName);
  if (!is) throw IoError("cannot open " + (dir / kManifestName).string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / kManifestName).string() + ": " + e.what());
  }
}

VideoClip read_clip(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = entry.path().extension().string();
    const auto stem = entry.path().stem().string();
    if ((ext == ".pgm" || ext == ".ppm") && stem.rfind("frame_", 0) == 0) files.push_back(entry.path());
  }
  if (files.empty()) throw IoError(dir.string() + " contains no frames");
  std::sort(files.begin(), files.end());
  const auto first = read_pnm(files[0]);
  VideoClip clip(files.size(), first.dim(0), first.dim(1), first.dim(2));
  clip.set_frame(0, first);
  for (std::size_t i = 1; i < files.size(); ++i) {
    const auto f = read_pnm(files[i]);
    if (f.shape() != first.shape()) throw IoError(files[i].string() + ": frame geometry differs from the first frame");
    clip.set_frame(i, f);
  }
  if (fs::exists(dir / kManifestName)) {
    const auto m = read_manifest(dir);
    auto check = [&](const char* key, std::size_t v) {
      if (m.contains(key) && m.at(key).get<std::size_t>() != v) {
        throw IoError(dir.string() + ": manifest " + key + " disagrees with the frames on disk");
      }
    };
    check("frames", clip.frames());
    check("channels", clip.channels());
    check("height", clip.height());
    check("width", clip.width());
  }
  return clip;
}

void write_clip(const fs::path& dir, const VideoClip& clip, const nlohmann::json& extra) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < clip.frames(); ++i) write_pnm(dir / frame_file_name(i, clip.channels()), clip.frame(i));
  nlohmann::json m = extra.is_object() ? extra : nlohmann::json::object();
  m["frames"] = clip.frames();
  m["channels"] = clip.channels();
  m["height"] = clip.height();
  m["width"] = clip.width();
  std::ofstream os(dir / kManifestName);
  os << m.dump(2) << '\n';
  if (!os) throw IoError("failed writing " + (dir / kManifestName).string());
}

}  // namespace mamat
