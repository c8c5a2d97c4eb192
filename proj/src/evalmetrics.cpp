#include "disdet/evalmetrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "disdet/losses.hpp"

namespace disdet {

namespace fs = std::filesystem;
using nlohmann::json;

double ap_from_curve(const std::vector<double>& recall, const std::vector<double>& precision,
                     ApProtocol protocol) {
  if (recall.size() != precision.size()) throw std::invalid_argument("recall/precision length mismatch");
  if (protocol == ApProtocol::kElevenPoint) {
    double sum = 0.0;
    for (int i = 0; i <= 10; ++i) {
      const double t = i / 10.0;
      double best = 0.0;
      for (std::size_t k = 0; k < recall.size(); ++k) {
        if (recall[k] >= t) best = std::max(best, precision[k]);
      }
      sum += best;
    }
    return sum / 11.0;
  }
  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  }
  return ap;
}

std::optional<double> class_average_precision(const std::vector<Detection>& detections,
                                              const std::vector<GroundTruthImage>& truth, int label,
                                              double iou_threshold, ApProtocol protocol) {
  std::map<std::string, std::vector<BoundingBox>> gt;
  std::map<std::string, std::vector<bool>> used;
  std::size_t npos = 0;
  for (const auto& img : truth) {
    auto& boxes = gt[img.image_id];
    for (const auto& b : img.boxes) {
      if (b.label != label) continue;
      boxes.push_back(b.box);
      ++npos;
    }
    used[img.image_id].assign(boxes.size(), false);
  }
  if (npos == 0) return std::nullopt;

  std::vector<const Detection*> ranked;
  for (const auto& d : detections) {
    if (d.label == label) ranked.push_back(&d);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Detection* a, const Detection* b) { return a->confidence > b->confidence; });

  std::vector<double> recall, precision;
  std::size_t tp = 0, fp = 0;
  for (const Detection* d : ranked) {
    bool hit = false;
    auto it = gt.find(d->image_id);
    if (it != gt.end() && !it->second.empty()) {
      const auto& boxes = it->second;
      double best = -1.0;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < boxes.size(); ++j) {
        const double o = iou(d->box, boxes[j]);
        if (o > best) {
          best = o;
          best_j = j;
        }
      }
      auto& flags = used[d->image_id];
      if (best >= iou_threshold && !flags[best_j]) {
        flags[best_j] = true;
        hit = true;
      }
    }
    hit ? ++tp : ++fp;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(npos));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  return ap_from_curve(recall, precision, protocol);
}

APResult average_precision(const std::vector<Detection>& detections,
                           const std::vector<GroundTruthImage>& truth, int num_classes,
                           double iou_threshold, ApProtocol protocol) {
  APResult r;
  r.iou_threshold = iou_threshold;
  r.protocol = protocol;
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    auto ap = class_average_precision(detections, truth, c, iou_threshold, protocol);
    r.per_class.push_back(ap);
    if (ap) {
      sum += *ap;
      ++counted;
    }
  }
  r.map = counted > 0 ? sum / counted : 0.0;
  return r;
}

// ---------------------------------------------------------------------------

std::vector<Detection> detect(DisentangledDetector& net, const torch::Tensor& images,
                              const std::vector<std::string>& image_ids,
                              const InferenceOptions& options) {
  TORCH_CHECK(images.size(0) == static_cast<int64_t>(image_ids.size()), "detect: one id per image");
  torch::NoGradGuard guard;
  const int64_t h = images.size(2), w = images.size(3);
  const auto& cfg = net->config();
  auto l1 = net->forward_first_layer(images, {true, false});
  auto l2 = net->forward_second_layer(l1.f1, {true, false});
  auto proposals = net->propose(l2.f_di2, cfg.top_k_eval, h, w);
  std::vector<Detection> out;
  if (proposals.empty()) return out;

  const auto& fmap = options.head == "d_b" ? l2.f_b2 : l2.f_di2;
  auto rois = net->align(fmap, proposals, options.head == "d_b" ? Branch::kBase : Branch::kInvariant);
  auto head = net->detect(options.head, rois);
  auto probs = torch::softmax(head.logits, 1);
  const BoxCoder coder{kHeadBoxWeights};

  for (int64_t b = 0; b < images.size(0); ++b) {
    auto rows = (proposals.batch_index == b).nonzero().squeeze(1);
    if (rows.size(0) == 0) continue;
    auto ref = proposals.boxes.index_select(0, rows);
    for (int64_t c = 0; c < cfg.num_classes; ++c) {
      auto scores = probs.index_select(0, rows).select(1, c + 1);
      auto boxes = coder.decode(ref, head.deltas.index_select(0, rows).select(1, c));
      boxes = torch::stack({boxes.select(1, 0).clamp(0, w), boxes.select(1, 1).clamp(0, h),
                            boxes.select(1, 2).clamp(0, w), boxes.select(1, 3).clamp(0, h)},
                           1);
      auto valid = (scores > options.score_floor) &
                   ((boxes.select(1, 2) - boxes.select(1, 0)) > 0) &
                   ((boxes.select(1, 3) - boxes.select(1, 1)) > 0);
      auto idx = valid.nonzero().squeeze(1);
      if (idx.size(0) == 0) continue;
      auto kb = boxes.index_select(0, idx);
      auto ks = scores.index_select(0, idx);
      auto keep = nms(kb, ks, options.nms);
      auto kb64 = kb.to(torch::kFloat64);
      auto ks64 = ks.to(torch::kFloat64);
      for (int64_t i = 0; i < keep.size(0); ++i) {
        const int64_t k = keep[i].item<int64_t>();
        auto bb = BoundingBox::try_make(kb64[k][0].item<double>(), kb64[k][1].item<double>(),
                                        kb64[k][2].item<double>(), kb64[k][3].item<double>());
        if (!bb) continue;
        out.push_back({image_ids[static_cast<std::size_t>(b)], *bb, static_cast<int>(c),
                       ks64[k].item<double>()});
      }
    }
  }
  return out;
}

std::vector<Detection> detect_dataset(DisentangledDetector& net, const Dataset& data,
                                      const std::vector<double>& pixel_mean,
                                      const InferenceOptions& options) {
  std::vector<Detection> all;
  const auto n = data.size();
  const auto bs = static_cast<std::size_t>(std::max<int64_t>(1, options.batch_size));
  for (std::size_t start = 0; start < n; start += bs) {
    std::vector<torch::Tensor> pixels;
    std::vector<std::string> ids;
    for (std::size_t i = start; i < std::min(n, start + bs); ++i) {
      pixels.push_back(data[i].pixels);
      ids.push_back(data[i].image_id);
    }
    auto images = normalize_images(torch::stack(pixels), pixel_mean);
    auto dets = detect(net, images, ids, options);
    all.insert(all.end(), dets.begin(), dets.end());
  }
  return all;
}

std::vector<std::string> class_names(int num_classes) {
  static const std::vector<std::string> shapes{"circle", "square", "triangle"};
  std::vector<std::string> out;
  for (int c = 0; c < num_classes; ++c) {
    out.push_back(num_classes == 3 ? shapes[static_cast<std::size_t>(c)] : "class" + std::to_string(c));
  }
  return out;
}

APResult evaluate(LoadedModel& model, const Dataset& data, const EvalOutputs& outputs,
                  ApProtocol protocol) {
  if (data.empty()) throw std::invalid_argument("evaluation dataset is empty");
  const int classes = static_cast<int>(model.config.net.num_classes);
  if (data.max_label_count() > classes) {
    throw std::invalid_argument("dataset labels exceed the model's num_classes=" + std::to_string(classes));
  }
  InferenceOptions opts;
  opts.head = model.config.eval_head;
  opts.score_floor = model.config.eval_score_floor;
  opts.nms = model.config.eval_nms;
  auto dets = detect_dataset(model.net, data, model.config.pixel_mean, opts);
  std::vector<GroundTruthImage> truth;
  for (const auto& r : data.records()) truth.push_back({r.image_id, r.boxes});
  auto result = average_precision(dets, truth, classes, 0.5, protocol);
  if (outputs.detections_jsonl) write_detections_jsonl(*outputs.detections_jsonl, dets);
  if (outputs.metrics_csv) write_metrics_csv(*outputs.metrics_csv, result);
  return result;
}

APResult evaluate(const fs::path& checkpoint, const fs::path& data_dir, const EvalOutputs& outputs,
                  ApProtocol protocol) {
  auto model = load_model(checkpoint);
  auto data = Dataset::load(data_dir, Dataset::Boxes::kEvaluation);
  return evaluate(model, data, outputs, protocol);
}

std::string format_ap_table(const APResult& result) {
  const auto names = class_names(static_cast<int>(result.per_class.size()));
  std::ostringstream os;
  char cell[64];
  for (const auto& n : names) {
    std::snprintf(cell, sizeof(cell), "%10s", n.c_str());
    os << cell;
  }
  std::snprintf(cell, sizeof(cell), "%10s\n", "mAP");
  os << cell;
  for (const auto& ap : result.per_class) {
    if (ap) {
      std::snprintf(cell, sizeof(cell), "%10.2f", 100.0 * *ap);
    } else {
      std::snprintf(cell, sizeof(cell), "%10s", "-");
    }
    os << cell;
  }
  std::snprintf(cell, sizeof(cell), "%10.2f\n", 100.0 * result.map);
  os << cell;
  return os.str();
}

void write_detections_jsonl(const fs::path& file, const std::vector<Detection>& dets) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  for (const auto& d : dets) {
    json j{{"image_id", d.image_id},
           {"box", {d.box.x_min(), d.box.y_min(), d.box.x_max(), d.box.y_max()}},
           {"label", d.label},
           {"confidence", d.confidence}};
    out << j.dump() << '\n';
  }
}

void write_metrics_csv(const fs::path& file, const APResult& result) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  const auto names = class_names(static_cast<int>(result.per_class.size()));
  out << "class,ap\n";
  for (std::size_t c = 0; c < names.size(); ++c) {
    out << names[c] << ',';
    if (result.per_class[c]) out << *result.per_class[c];
    out << '\n';
  }
  out << "mAP," << result.map << '\n';
}

// ---------------------------------------------------------------------------

torch::Tensor feature_heatmap(const torch::Tensor& fmap_chw) {
  TORCH_CHECK(fmap_chw.dim() == 3, "feature_heatmap expects (C,H,W)");
  auto m = std::get<0>(fmap_chw.detach().to(torch::kFloat32).max(0));
  const double lo = m.min().item<double>();
  const double hi = m.max().item<double>();
  if (!(hi > lo)) return torch::zeros_like(m, torch::kUInt8);
  return ((m - lo) / (hi - lo) * 255.0).round().clamp(0, 255).to(torch::kUInt8);
}

void dump_features(const fs::path& checkpoint, const fs::path& image, const fs::path& out_dir) {
  auto model = load_model(checkpoint);
  auto pixels = read_rgb_png(image);
  auto x = normalize_images(pixels, model.config.pixel_mean).unsqueeze(0);
  torch::NoGradGuard guard;
  auto l1 = model.net->forward_first_layer(x, {true, true});
  auto l2 = model.net->forward_second_layer(l1.f1, {true, true});
  fs::create_directories(out_dir);
  write_gray_png(out_dir / "base.png", feature_heatmap(l2.f_b2[0]));
  write_gray_png(out_dir / "dir.png", feature_heatmap(l2.f_di2[0]));
  write_gray_png(out_dir / "dsr.png", feature_heatmap(l2.f_ds2[0]));
}

}  // namespace disdet
