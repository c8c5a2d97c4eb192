#include "disdet/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace disdet {

namespace fs = std::filesystem;
using nlohmann::json;

json to_json(const AnnotationLine& line) {
  json boxes = json::array();
  json labels = json::array();
  for (const auto& ab : line.boxes) {
    boxes.push_back({ab.box.x_min(), ab.box.y_min(), ab.box.x_max(), ab.box.y_max()});
    labels.push_back(ab.label);
  }
  return json{{"image_id", line.image_id},
              {"boxes", std::move(boxes)},
              {"labels", std::move(labels)},
              {"domain", static_cast<int>(line.domain)}};
}

AnnotationLine annotation_from_json(const json& j) {
  AnnotationLine line;
  line.image_id = j.at("image_id").get<std::string>();
  const auto& boxes = j.at("boxes");
  const auto& labels = j.at("labels");
  if (boxes.size() != labels.size()) {
    throw std::runtime_error("annotation '" + line.image_id + "': boxes/labels length mismatch");
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    if (b.size() != 4) {
      throw std::runtime_error("annotation '" + line.image_id + "': box needs 4 coordinates");
    }
    const int label = labels[i].get<int>();
    if (label < 0) {
      throw std::runtime_error("annotation '" + line.image_id + "': negative label");
    }
    line.boxes.push_back({BoundingBox(b[0].get<double>(), b[1].get<double>(),
                                      b[2].get<double>(), b[3].get<double>()),
                          label});
  }
  const int domain = j.at("domain").get<int>();
  if (domain != 0 && domain != 1) {
    throw std::runtime_error("annotation '" + line.image_id + "': domain must be 0 or 1");
  }
  line.domain = static_cast<Domain>(domain);
  return line;
}

std::vector<AnnotationLine> read_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open manifest " + file.string());
  std::vector<AnnotationLine> lines;
  std::string text;
  std::size_t lineno = 0;
  while (std::getline(in, text)) {
    ++lineno;
    if (text.empty()) continue;
    try {
      lines.push_back(annotation_from_json(json::parse(text)));
    } catch (const std::exception& e) {
      throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return lines;
}

void write_manifest(const fs::path& file, const std::vector<AnnotationLine>& lines) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + file.string());
  for (const auto& line : lines) out << to_json(line).dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

torch::Tensor read_rgb_png(const fs::path& file) {
  cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read image " + file.string());
  TORCH_CHECK(bgr.isContinuous(), "unexpected non-contiguous image buffer");
  auto hwc = torch::from_blob(bgr.data, {bgr.rows, bgr.cols, 3}, torch::kUInt8);
  // OpenCV stores BGR
  return hwc.permute({2, 0, 1}).flip({0}).contiguous();
}

void write_rgb_png(const fs::path& file, const torch::Tensor& chw_uint8) {
  TORCH_CHECK(chw_uint8.dim() == 3 && chw_uint8.size(0) == 3 &&
                  chw_uint8.scalar_type() == torch::kUInt8,
              "write_rgb_png expects uint8 (3,H,W)");
  auto hwc = chw_uint8.flip({0}).permute({1, 2, 0}).contiguous();
  cv::Mat bgr(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3,
              hwc.data_ptr<uint8_t>());
  if (!cv::imwrite(file.string(), bgr)) {
    throw std::runtime_error("cannot write image " + file.string());
  }
}

void write_gray_png(const fs::path& file, const torch::Tensor& hw_uint8) {
  TORCH_CHECK(hw_uint8.dim() == 2 && hw_uint8.scalar_type() == torch::kUInt8,
              "write_gray_png expects uint8 (H,W)");
  auto hw = hw_uint8.contiguous();
  cv::Mat gray(static_cast<int>(hw.size(0)), static_cast<int>(hw.size(1)), CV_8UC1,
               hw.data_ptr<uint8_t>());
  if (!cv::imwrite(file.string(), gray)) {
    throw std::runtime_error("cannot write image " + file.string());
  }
}

Dataset Dataset::load(const fs::path& dir, Boxes which) {
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  const fs::path manifest = dir / layout::kManifest;
  const fs::path sealed = dir / layout::kSealedManifest;
  const bool use_sealed = which == Boxes::kEvaluation && fs::exists(sealed);
  auto lines = read_manifest(use_sealed ? sealed : manifest);

  Dataset ds;
  ds.records_.reserve(lines.size());
  for (auto& line : lines) {
    if (which == Boxes::kTraining && line.domain == Domain::kTarget && !line.boxes.empty()) {
      throw std::runtime_error("target image '" + line.image_id +
                               "' carries annotations in the training manifest");
    }
    ImageRecord rec;
    rec.pixels = read_rgb_png(dir / layout::kImagesDir / (line.image_id + ".png"));
    rec.image_id = std::move(line.image_id);
    rec.boxes = std::move(line.boxes);
    rec.domain = line.domain;
    ds.records_.push_back(std::move(rec));
  }
  return ds;
}

int Dataset::max_label_count() const {
  int n = 0;
  for (const auto& r : records_) {
    for (const auto& b : r.boxes) n = std::max(n, b.label + 1);
  }
  return n;
}

std::vector<double> Dataset::channel_mean() const {
  if (records_.empty()) throw std::runtime_error("channel_mean of an empty dataset");
  auto acc = torch::zeros({3}, torch::kFloat64);
  int64_t count = 0;
  for (const auto& r : records_) {
    acc += r.pixels.to(torch::kFloat64).sum({1, 2});
    count += r.pixels.size(1) * r.pixels.size(2);
  }
  acc = acc / (255.0 * static_cast<double>(count));
  return {acc[0].item<double>(), acc[1].item<double>(), acc[2].item<double>()};
}

torch::Tensor normalize_images(const torch::Tensor& uint8_images,
                               const std::vector<double>& channel_mean) {
  TORCH_CHECK(channel_mean.size() == 3, "channel mean needs 3 entries");
  auto x = uint8_images.to(torch::kFloat32).div(255.0f);
  auto mean = torch::tensor(std::vector<float>(channel_mean.begin(), channel_mean.end()));
  if (x.dim() == 3) return x - mean.view({3, 1, 1});
  return x - mean.view({1, 3, 1, 1});
}

std::vector<int> DomainBatch::domain_tags() const {
  std::vector<int> tags(static_cast<std::size_t>(num_source()), 0);
  tags.resize(tags.size() + static_cast<std::size_t>(num_target()), 1);
  return tags;
}

namespace {

torch::Tensor stack_pixels(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<torch::Tensor> imgs;
  imgs.reserve(idx.size());
  for (auto i : idx) imgs.push_back(ds[i].pixels);
  return torch::stack(imgs);
}

}  // namespace

DomainBatch make_batch(const Dataset& source, const std::vector<std::size_t>& source_indices,
                       const Dataset& target, const std::vector<std::size_t>& target_indices,
                       const std::vector<double>& channel_mean) {
  DomainBatch batch;
  if (!source_indices.empty()) {
    batch.source_images = normalize_images(stack_pixels(source, source_indices), channel_mean);
    for (auto i : source_indices) batch.source_boxes.push_back(source[i].boxes);
  }
  if (!target_indices.empty()) {
    batch.target_images = normalize_images(stack_pixels(target, target_indices), channel_mean);
  }
  return batch;
}

}  // namespace disdet
