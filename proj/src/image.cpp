#include "granudet/image.hpp"

#include <cmath>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <stdexcept>

namespace granudet {

namespace {

cv::Mat to_mat(const Image& image) {
  cv::Mat m(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(y, x, c), 0.0, 1.0);
        m.at<cv::Vec3b>(y, x)[2 - c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  return m;
}

}  // namespace

nn::Tensor Image::tensor() const {
  std::vector<double> v(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) v[i] = (rgb[i] - 0.5) * 4.0;
  return nn::Tensor(height * width, 3, std::move(v));
}

Image read_image(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) throw std::runtime_error("cannot read image: " + path);
  Image img(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = m.at<cv::Vec3b>(y, x)[2 - c] / 255.0;
  return img;
}

void write_image(const Image& image, const std::string& path) {
  if (!cv::imwrite(path, to_mat(image))) throw std::runtime_error("cannot write image: " + path);
}

Image resize_image(const Image& image, int height, int width) {
  if (height == image.height && width == image.width) return image;
  cv::Mat src(image.height, image.width, CV_64FC3, const_cast<double*>(image.rgb.data()));
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  Image out(height, width);
  std::copy(dst.ptr<double>(0), dst.ptr<double>(0) + out.rgb.size(), out.rgb.begin());
  return out;
}

}  // namespace granudet
