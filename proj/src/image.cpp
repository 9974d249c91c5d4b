#include "protosim/image.hpp"

#include "protosim/common.hpp"
#include "protosim/io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cctype>
#include <cstring>

namespace protosim {

namespace {

cv::Mat to_cv(const Image& image) {
  cv::Mat m(image.height, image.width, CV_32FC(image.channels));
  std::memcpy(m.data, image.pixels.data(), image.pixels.size() * sizeof(float));
  return m;
}

Image from_cv(const cv::Mat& m) {
  cv::Mat f;
  m.convertTo(f, CV_32F);
  Image out(f.rows, f.cols, f.channels());
  if (!f.isContinuous()) f = f.clone();
  std::memcpy(out.pixels.data(), f.data, out.pixels.size() * sizeof(float));
  return out;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error&) {
    throw Error("cannot read image '" + path.string() + "'");
  }
  cv::Mat decoded = cv::imdecode(bytes, cv::IMREAD_COLOR);
  if (decoded.empty()) throw Error("cannot decode image '" + path.string() + "'");
  cv::Mat rgb;
  cv::cvtColor(decoded, rgb, cv::COLOR_BGR2RGB);
  cv::Mat scaled;
  rgb.convertTo(scaled, CV_32FC3, 1.0 / 255.0);
  return from_cv(scaled);
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.channels != 3 && image.channels != 1) throw ContractError("encode_png: need 1 or 3 channels");
  cv::Mat f = to_cv(image);
  cv::Mat u8;
  f.convertTo(u8, image.channels == 3 ? CV_8UC3 : CV_8UC1, 255.0);  // saturating
  if (image.channels == 3) cv::cvtColor(u8, u8, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", u8, out)) throw Error("PNG encoding failed");
  return out;
}

void save_png(const Image& image, const std::filesystem::path& path) {
  write_file_atomic(path, encode_png(image));
}

Image resize(const Image& image, int height, int width) {
  if (height < 1 || width < 1) throw ContractError("resize: target size must be positive");
  if (image.height == height && image.width == width) return image;
  cv::Mat out;
  cv::resize(to_cv(image), out, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  return from_cv(out);
}

Image crop(const Image& image, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > image.height ||
      left + width > image.width)
    throw ContractError("crop: rectangle outside image");
  Image out(height, width, image.channels);
  const std::size_t row_len = static_cast<std::size_t>(width) * image.channels;
  for (int y = 0; y < height; ++y)
    std::copy_n(&image.pixels[(static_cast<std::size_t>(top + y) * image.width + left) * image.channels],
                row_len, &out.pixels[static_cast<std::size_t>(y) * row_len]);
  return out;
}

Image gaussian_blur(const Image& image, double sigma) {
  if (sigma <= 0.0) return image;
  cv::Mat out;
  cv::GaussianBlur(to_cv(image), out, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT_101);
  return from_cv(out);
}

bool is_image_file(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".ppm";
}

}  // namespace protosim
