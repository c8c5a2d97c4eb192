#include "disdet/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace disdet {

namespace nn = torch::nn;
using nlohmann::json;

void to_json(json& j, const NetConfig& c) {
  j = json{{"in_channels", c.in_channels},
           {"num_classes", c.num_classes},
           {"c1", c.c1},
           {"c2", c.c2},
           {"rpn_hidden", c.rpn_hidden},
           {"head_hidden", c.head_hidden},
           {"classifier_hidden", c.classifier_hidden},
           {"mi_hidden", c.mi_hidden},
           {"roi_size", c.roi_size},
           {"anchor_size", c.anchor_size},
           {"anchor_ratios", c.anchor_ratios},
           {"rpn_nms", c.rpn_nms},
           {"rpn_positive_iou", c.rpn_positive_iou},
           {"rpn_negative_iou", c.rpn_negative_iou},
           {"top_k_train", c.top_k_train},
           {"top_k_eval", c.top_k_eval},
           {"zero_init_residual", c.zero_init_residual},
           {"one_layer", c.one_layer}};
}

void from_json(const json& j, NetConfig& c) {
  const NetConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.c1 = j.value("c1", d.c1);
  c.c2 = j.value("c2", d.c2);
  c.rpn_hidden = j.value("rpn_hidden", d.rpn_hidden);
  c.head_hidden = j.value("head_hidden", d.head_hidden);
  c.classifier_hidden = j.value("classifier_hidden", d.classifier_hidden);
  c.mi_hidden = j.value("mi_hidden", d.mi_hidden);
  c.roi_size = j.value("roi_size", d.roi_size);
  c.anchor_size = j.value("anchor_size", d.anchor_size);
  c.anchor_ratios = j.value("anchor_ratios", d.anchor_ratios);
  c.rpn_nms = j.value("rpn_nms", d.rpn_nms);
  c.rpn_positive_iou = j.value("rpn_positive_iou", d.rpn_positive_iou);
  c.rpn_negative_iou = j.value("rpn_negative_iou", d.rpn_negative_iou);
  c.top_k_train = j.value("top_k_train", d.top_k_train);
  c.top_k_eval = j.value("top_k_eval", d.top_k_eval);
  c.zero_init_residual = j.value("zero_init_residual", d.zero_init_residual);
  c.one_layer = j.value("one_layer", d.one_layer);
  if (c.num_classes < 1 || c.c1 < 1 || c.c2 < 1 || c.roi_size < 1 || c.anchor_ratios.empty() ||
      c.top_k_train < 1 || c.top_k_eval < 1 || !(c.anchor_size > 0.0)) {
    throw std::invalid_argument("invalid network configuration");
  }
}

// ---------------------------------------------------------------------------

torch::Tensor box_iou_matrix(const torch::Tensor& a, const torch::Tensor& b) {
  auto area_a = (a.select(1, 2) - a.select(1, 0)) * (a.select(1, 3) - a.select(1, 1));
  auto area_b = (b.select(1, 2) - b.select(1, 0)) * (b.select(1, 3) - b.select(1, 1));
  auto lt = torch::max(a.unsqueeze(1).narrow(2, 0, 2), b.unsqueeze(0).narrow(2, 0, 2));
  auto rb = torch::min(a.unsqueeze(1).narrow(2, 2, 2), b.unsqueeze(0).narrow(2, 2, 2));
  auto wh = (rb - lt).clamp_min(0);
  auto inter = wh.select(2, 0) * wh.select(2, 1);
  return inter / (area_a.unsqueeze(1) + area_b.unsqueeze(0) - inter);
}

torch::Tensor BoxCoder::encode(const torch::Tensor& reference, const torch::Tensor& target) const {
  auto rw = reference.select(1, 2) - reference.select(1, 0);
  auto rh = reference.select(1, 3) - reference.select(1, 1);
  auto rx = reference.select(1, 0) + 0.5 * rw;
  auto ry = reference.select(1, 1) + 0.5 * rh;
  auto tw = target.select(1, 2) - target.select(1, 0);
  auto th = target.select(1, 3) - target.select(1, 1);
  auto tx = target.select(1, 0) + 0.5 * tw;
  auto ty = target.select(1, 1) + 0.5 * th;
  return torch::stack({weights[0] * (tx - rx) / rw, weights[1] * (ty - ry) / rh,
                       weights[2] * torch::log(tw / rw), weights[3] * torch::log(th / rh)},
                      1);
}

torch::Tensor BoxCoder::decode(const torch::Tensor& reference, const torch::Tensor& deltas) const {
  static const double kMaxLogScale = std::log(1000.0 / 16.0);
  auto rw = reference.select(1, 2) - reference.select(1, 0);
  auto rh = reference.select(1, 3) - reference.select(1, 1);
  auto rx = reference.select(1, 0) + 0.5 * rw;
  auto ry = reference.select(1, 1) + 0.5 * rh;
  auto dx = deltas.select(1, 0) / weights[0];
  auto dy = deltas.select(1, 1) / weights[1];
  auto dw = (deltas.select(1, 2) / weights[2]).clamp_max(kMaxLogScale);
  auto dh = (deltas.select(1, 3) / weights[3]).clamp_max(kMaxLogScale);
  auto cx = rx + dx * rw;
  auto cy = ry + dy * rh;
  auto w = rw * torch::exp(dw);
  auto h = rh * torch::exp(dh);
  return torch::stack({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}, 1);
}

torch::Tensor nms(const torch::Tensor& boxes, const torch::Tensor& scores, double threshold) {
  const int64_t n = boxes.size(0);
  if (n == 0) return torch::empty({0}, torch::kLong);
  auto order = std::get<1>(scores.to(torch::kFloat64).sort(/*stable=*/true, /*dim=*/0,
                                                          /*descending=*/true));
  auto b = boxes.to(torch::kFloat64).contiguous();
  auto ba = b.accessor<double, 2>();
  auto oa = order.accessor<int64_t, 1>();
  std::vector<char> suppressed(static_cast<std::size_t>(n), 0);
  std::vector<int64_t> keep;
  for (int64_t oi = 0; oi < n; ++oi) {
    const int64_t i = oa[oi];
    if (suppressed[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    const double area_i = (ba[i][2] - ba[i][0]) * (ba[i][3] - ba[i][1]);
    for (int64_t oj = oi + 1; oj < n; ++oj) {
      const int64_t j = oa[oj];
      if (suppressed[static_cast<std::size_t>(j)]) continue;
      const double iw = std::min(ba[i][2], ba[j][2]) - std::max(ba[i][0], ba[j][0]);
      const double ih = std::min(ba[i][3], ba[j][3]) - std::max(ba[i][1], ba[j][1]);
      if (iw <= 0.0 || ih <= 0.0) continue;
      const double inter = iw * ih;
      const double area_j = (ba[j][2] - ba[j][0]) * (ba[j][3] - ba[j][1]);
      if (inter / (area_i + area_j - inter) > threshold) suppressed[static_cast<std::size_t>(j)] = 1;
    }
  }
  return torch::tensor(keep, torch::kLong);
}

torch::Tensor boxes_to_tensor(const std::vector<AnnotatedBox>& boxes) {
  std::vector<float> flat;
  flat.reserve(boxes.size() * 4);
  for (const auto& ab : boxes) {
    flat.push_back(static_cast<float>(ab.box.x_min()));
    flat.push_back(static_cast<float>(ab.box.y_min()));
    flat.push_back(static_cast<float>(ab.box.x_max()));
    flat.push_back(static_cast<float>(ab.box.y_max()));
  }
  return torch::tensor(flat, torch::kFloat32).view({static_cast<int64_t>(boxes.size()), 4});
}

torch::Tensor labels_to_tensor(const std::vector<AnnotatedBox>& boxes) {
  std::vector<int64_t> labels;
  labels.reserve(boxes.size());
  for (const auto& ab : boxes) labels.push_back(ab.label);
  return torch::tensor(labels, torch::kLong);
}

// ---------------------------------------------------------------------------

BoundingBox ProposalSet::box(int64_t i) const {
  auto b = boxes[i].to(torch::kFloat64);
  return BoundingBox(b[0].item<double>(), b[1].item<double>(), b[2].item<double>(),
                     b[3].item<double>());
}

ProposalSet ProposalSet::for_image(int64_t b) const {
  if (empty()) return empty_set();
  auto idx = (batch_index == b).nonzero().squeeze(1);
  return {boxes.index_select(0, idx), objectness.index_select(0, idx),
          batch_index.index_select(0, idx)};
}

ProposalSet ProposalSet::empty_set() {
  return {torch::zeros({0, 4}), torch::zeros({0}), torch::zeros({0}, torch::kLong)};
}

ProposalSet ProposalSet::concat(const std::vector<ProposalSet>& parts) {
  if (parts.empty()) return empty_set();
  std::vector<torch::Tensor> b, s, i;
  for (const auto& p : parts) {
    b.push_back(p.boxes);
    s.push_back(p.objectness);
    i.push_back(p.batch_index);
  }
  return {torch::cat(b), torch::cat(s), torch::cat(i)};
}

// ---------------------------------------------------------------------------

RoIFeatures roi_align(const torch::Tensor& fmap, const ProposalSet& proposals, int64_t out_size,
                      double stride, Branch branch) {
  TORCH_CHECK(fmap.dim() == 4, "roi_align expects a (B,C,H,W) feature map");
  TORCH_CHECK(out_size >= 1 && stride > 0.0, "roi_align: invalid output size or stride");
  const int64_t channels = fmap.size(1);
  const int64_t height = fmap.size(2);
  const int64_t width = fmap.size(3);
  const int64_t k = proposals.size();
  if (k == 0) return {fmap.new_zeros({0, channels, out_size, out_size}), branch};

  const auto opts = fmap.options().requires_grad(false);
  auto boxes = proposals.boxes.to(opts.dtype()) / stride;
  auto bins = (torch::arange(out_size, opts) + 0.5) / static_cast<double>(out_size);
  auto span_x = (boxes.select(1, 2) - boxes.select(1, 0)).unsqueeze(1);
  auto span_y = (boxes.select(1, 3) - boxes.select(1, 1)).unsqueeze(1);
  // Cell j of the map sits at continuous coordinate j + 0.5.
  auto xs = (boxes.select(1, 0).unsqueeze(1) + bins.unsqueeze(0) * span_x - 0.5)
                .clamp(0.0, static_cast<double>(width - 1));
  auto ys = (boxes.select(1, 1).unsqueeze(1) + bins.unsqueeze(0) * span_y - 0.5)
                .clamp(0.0, static_cast<double>(height - 1));

  auto x0 = xs.floor();
  auto y0 = ys.floor();
  auto lx = (xs - x0).unsqueeze(1);  // (K,1,S)
  auto ly = (ys - y0).unsqueeze(2);  // (K,S,1)
  auto x0i = x0.to(torch::kLong);
  auto y0i = y0.to(torch::kLong);
  auto x1i = (x0i + 1).clamp_max(width - 1);
  auto y1i = (y0i + 1).clamp_max(height - 1);

  auto base = (proposals.batch_index.to(torch::kLong) * (height * width)).view({k, 1, 1});
  auto index_of = [&](const torch::Tensor& yi, const torch::Tensor& xi) {
    return (base + yi.unsqueeze(2) * width + xi.unsqueeze(1)).reshape({-1});
  };

  auto flat = fmap.permute({0, 2, 3, 1}).reshape({-1, channels});
  auto gather = [&](const torch::Tensor& yi, const torch::Tensor& xi) {
    return flat.index_select(0, index_of(yi, xi)).view({k, out_size, out_size, channels});
  };
  auto w00 = ((1 - ly) * (1 - lx)).unsqueeze(3);
  auto w01 = ((1 - ly) * lx).unsqueeze(3);
  auto w10 = (ly * (1 - lx)).unsqueeze(3);
  auto w11 = (ly * lx).unsqueeze(3);
  auto out = w00 * gather(y0i, x0i) + w01 * gather(y0i, x1i) + w10 * gather(y1i, x0i) +
             w11 * gather(y1i, x1i);
  return {out.permute({0, 3, 1, 2}).contiguous(), branch};
}

namespace {

class GradientReversal : public torch::autograd::Function<GradientReversal> {
 public:
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& x,
                               double lambda) {
    ctx->saved_data["lambda"] = lambda;
    return x.clone();
  }

  static torch::autograd::variable_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::variable_list grads) {
    const double lambda = ctx->saved_data["lambda"].toDouble();
    return {grads[0] * -lambda, torch::Tensor()};
  }
};

// Adversarial and MI networks use leaky units: with plain ReLU a classifier
// pushed around by reversed gradients can end up with every hidden unit dead.
constexpr double kLeakySlope = 0.2;

void kaiming_init(nn::Conv2d& conv) {
  nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanIn, torch::kReLU);
  nn::init::zeros_(conv->bias);
}

void kaiming_init(nn::Linear& fc) {
  nn::init::kaiming_normal_(fc->weight, 0.0, torch::kFanIn, torch::kReLU);
  nn::init::zeros_(fc->bias);
}

void normal_init(nn::Linear& fc, double std) {
  nn::init::normal_(fc->weight, 0.0, std);
  nn::init::zeros_(fc->bias);
}

}  // namespace

torch::Tensor grl(const torch::Tensor& x, double lambda) {
  TORCH_CHECK(lambda >= 0.0, "grl: lambda must be non-negative");
  return GradientReversal::apply(x, lambda);
}

// ---------------------------------------------------------------------------

ConvStageImpl::ConvStageImpl(std::vector<int64_t> channels, std::vector<int64_t> strides) {
  TORCH_CHECK(channels.size() == strides.size() + 1, "ConvStage: channels/strides mismatch");
  for (std::size_t i = 0; i < strides.size(); ++i) {
    nn::Conv2d conv(nn::Conv2dOptions(channels[i], channels[i + 1], 3).stride(strides[i]).padding(1));
    kaiming_init(conv);
    convs_->push_back(conv);
  }
  register_module("convs", convs_);
}

torch::Tensor ConvStageImpl::forward(torch::Tensor x) {
  for (const auto& m : *convs_) x = torch::relu(m->as<nn::Conv2d>()->forward(x));
  return x;
}

ExtractorImpl::ExtractorImpl(int64_t channels, bool zero_init_last) {
  auto make = [&] { return nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1)); };
  conv1_ = register_module("conv1", make());
  conv2_ = register_module("conv2", make());
  conv3_ = register_module("conv3", make());
  kaiming_init(conv1_);
  kaiming_init(conv2_);
  if (zero_init_last) {
    nn::init::zeros_(conv3_->weight);
    nn::init::zeros_(conv3_->bias);
  } else {
    nn::init::kaiming_normal_(conv3_->weight, 0.0, torch::kFanIn, torch::kLinear);
    nn::init::zeros_(conv3_->bias);
  }
}

torch::Tensor ExtractorImpl::forward(torch::Tensor x) {
  x = torch::relu(conv1_->forward(x));
  x = torch::relu(conv2_->forward(x));
  return conv3_->forward(x);
}

RpnImpl::RpnImpl(const NetConfig& cfg)
    : anchor_size_(cfg.anchor_size),
      ratios_(cfg.anchor_ratios),
      stride_(static_cast<double>(cfg.stride2())) {
  const int64_t a = cfg.num_anchors();
  conv_ = register_module("conv", nn::Conv2d(nn::Conv2dOptions(cfg.c2, cfg.rpn_hidden, 3).padding(1)));
  cls_ = register_module("cls", nn::Conv2d(nn::Conv2dOptions(cfg.rpn_hidden, a, 1)));
  reg_ = register_module("reg", nn::Conv2d(nn::Conv2dOptions(cfg.rpn_hidden, 4 * a, 1)));
  kaiming_init(conv_);
  nn::init::normal_(cls_->weight, 0.0, 0.01);
  nn::init::zeros_(cls_->bias);
  nn::init::normal_(reg_->weight, 0.0, 0.01);
  nn::init::zeros_(reg_->bias);
}

torch::Tensor RpnImpl::anchors(int64_t height, int64_t width) const {
  const auto a = static_cast<int64_t>(ratios_.size());
  std::vector<float> flat;
  flat.reserve(static_cast<std::size_t>(height * width * a * 4));
  for (int64_t i = 0; i < height; ++i) {
    for (int64_t j = 0; j < width; ++j) {
      const double cx = (static_cast<double>(j) + 0.5) * stride_;
      const double cy = (static_cast<double>(i) + 0.5) * stride_;
      for (double ratio : ratios_) {
        // ratio = height / width at constant area
        const double w = anchor_size_ / std::sqrt(ratio);
        const double h = anchor_size_ * std::sqrt(ratio);
        flat.push_back(static_cast<float>(cx - 0.5 * w));
        flat.push_back(static_cast<float>(cy - 0.5 * h));
        flat.push_back(static_cast<float>(cx + 0.5 * w));
        flat.push_back(static_cast<float>(cy + 0.5 * h));
      }
    }
  }
  return torch::tensor(flat).view({height * width * a, 4});
}

RpnOutput RpnImpl::forward(const torch::Tensor& fmap) {
  const int64_t b = fmap.size(0);
  const int64_t h = fmap.size(2);
  const int64_t w = fmap.size(3);
  const auto a = static_cast<int64_t>(ratios_.size());
  auto x = torch::relu(conv_->forward(fmap));
  auto logits = cls_->forward(x).permute({0, 2, 3, 1}).reshape({b, h * w * a});
  auto deltas = reg_->forward(x).view({b, a, 4, h, w}).permute({0, 3, 4, 1, 2}).reshape({b, h * w * a, 4});
  return {logits, deltas, anchors(h, w)};
}

DetectionHeadImpl::DetectionHeadImpl(int64_t in_features, int64_t hidden, int64_t num_classes)
    : num_classes_(num_classes) {
  fc1_ = register_module("fc1", nn::Linear(in_features, hidden));
  fc2_ = register_module("fc2", nn::Linear(hidden, hidden));
  cls_ = register_module("cls", nn::Linear(hidden, num_classes + 1));
  reg_ = register_module("reg", nn::Linear(hidden, num_classes * 4));
  kaiming_init(fc1_);
  kaiming_init(fc2_);
  normal_init(cls_, 0.01);
  normal_init(reg_, 0.001);
}

DetectionOutput DetectionHeadImpl::forward(const torch::Tensor& rois) {
  auto x = rois.flatten(1);
  x = torch::relu(fc1_->forward(x));
  x = torch::relu(fc2_->forward(x));
  return {cls_->forward(x), reg_->forward(x).view({-1, num_classes_, 4})};
}

void DetectionHeadImpl::zero_output_layers() {
  torch::NoGradGuard guard;
  cls_->weight.zero_();
  cls_->bias.zero_();
  reg_->weight.zero_();
  reg_->bias.zero_();
}

DomainClassifierImpl::DomainClassifierImpl(int64_t channels, int64_t hidden) {
  fc1_ = register_module("fc1", nn::Linear(channels, hidden));
  fc2_ = register_module("fc2", nn::Linear(hidden, hidden / 2));
  fc3_ = register_module("fc3", nn::Linear(hidden / 2, 1));
  kaiming_init(fc1_);
  kaiming_init(fc2_);
  normal_init(fc3_, 0.01);
}

torch::Tensor DomainClassifierImpl::forward(const torch::Tensor& fmap) {
  auto x = fmap.mean({2, 3});
  x = torch::leaky_relu(fc1_->forward(x), kLeakySlope);
  x = torch::leaky_relu(fc2_->forward(x), kLeakySlope);
  return fc3_->forward(x).squeeze(1);
}

void DomainClassifierImpl::zero_output_layer() {
  torch::NoGradGuard guard;
  fc3_->weight.zero_();
  fc3_->bias.zero_();
}

MiStatisticImpl::MiStatisticImpl(int64_t x_dim, int64_t z_dim, int64_t hidden) {
  fc1_ = register_module("fc1", nn::Linear(x_dim + z_dim, hidden));
  fc2_ = register_module("fc2", nn::Linear(hidden, hidden));
  fc3_ = register_module("fc3", nn::Linear(hidden, 1));
  kaiming_init(fc1_);
  kaiming_init(fc2_);
  normal_init(fc3_, 0.01);
}

torch::Tensor MiStatisticImpl::forward(const torch::Tensor& x, const torch::Tensor& z) {
  auto h = torch::leaky_relu(fc1_->forward(torch::cat({x, z}, 1)), kLeakySlope);
  h = torch::leaky_relu(fc2_->forward(h), kLeakySlope);
  return fc3_->forward(h).squeeze(1);
}

ReconstructorImpl::ReconstructorImpl(int64_t channels) {
  conv_ = register_module("conv", nn::Conv2d(nn::Conv2dOptions(2 * channels, channels, 1)));
  nn::init::kaiming_normal_(conv_->weight, 0.0, torch::kFanIn, torch::kLinear);
  nn::init::zeros_(conv_->bias);
}

torch::Tensor ReconstructorImpl::forward(const torch::Tensor& concatenated) {
  return conv_->forward(concatenated);
}

// ---------------------------------------------------------------------------

DisentangledDetectorImpl::DisentangledDetectorImpl(const NetConfig& cfg) : cfg_(cfg) {
  const int64_t roi_features = cfg.c2 * cfg.roi_size * cfg.roi_size;
  e_b1 = register_module("e_b1", ConvStage(std::vector<int64_t>{cfg.in_channels, cfg.c1 / 2, cfg.c1, cfg.c1},
                                           std::vector<int64_t>{2, 2, 1}));
  e_b2 = register_module("e_b2", ConvStage(std::vector<int64_t>{cfg.c1, cfg.c2, cfg.c2},
                                           std::vector<int64_t>{2, 1}));
  e_dir1 = register_module("e_dir1", Extractor(cfg.c1, cfg.zero_init_residual));
  e_dsr1 = register_module("e_dsr1", Extractor(cfg.c1, false));
  e_dir2 = register_module("e_dir2", Extractor(cfg.c2, false));
  e_dsr2 = register_module("e_dsr2", Extractor(cfg.c2, false));
  rpn = register_module("rpn", Rpn(cfg));
  d_b = register_module("d_b", DetectionHead(roi_features, cfg.head_hidden, cfg.num_classes));
  d_di = register_module("d_di", DetectionHead(roi_features, cfg.head_hidden, cfg.num_classes));
  c_b1 = register_module("c_b1", DomainClassifier(cfg.c1, cfg.classifier_hidden));
  c_ds1 = register_module("c_ds1", DomainClassifier(cfg.c1, cfg.classifier_hidden));
  c_b2 = register_module("c_b2", DomainClassifier(cfg.c2, cfg.classifier_hidden));
  c_ds2 = register_module("c_ds2", DomainClassifier(cfg.c2, cfg.classifier_hidden));
  t1 = register_module("t1", MiStatistic(cfg.c1, cfg.c1, cfg.mi_hidden));
  t2 = register_module("t2", MiStatistic(cfg.c2, cfg.c2, cfg.mi_hidden));
  r = register_module("r", Reconstructor(cfg.c2));
}

const std::vector<std::string>& DisentangledDetectorImpl::group_names() {
  static const std::vector<std::string> names{"e_b1",  "e_b2", "e_dir1", "e_dsr1", "e_dir2", "e_dsr2",
                                              "rpn",   "d_b",  "d_di",   "c_b1",   "c_ds1",  "c_b2",
                                              "c_ds2", "t1",   "t2",     "r"};
  return names;
}

torch::nn::Module& DisentangledDetectorImpl::group(const std::string& name) {
  for (const auto& item : named_children()) {
    if (item.key() == name) return *item.value();
  }
  throw std::invalid_argument("unknown parameter group '" + name + "'");
}

std::vector<torch::Tensor> DisentangledDetectorImpl::group_parameters(const std::string& name) {
  return group(name).parameters();
}

void DisentangledDetectorImpl::set_group_trainable(const std::string& name, bool trainable) {
  for (auto& p : group_parameters(name)) p.requires_grad_(trainable);
}

void DisentangledDetectorImpl::set_trainable_groups(const std::vector<std::string>& names) {
  for (const auto& g : group_names()) {
    const bool on = std::find(names.begin(), names.end(), g) != names.end();
    set_group_trainable(g, on);
  }
  for (const auto& n : names) group(n);  // rejects unknown names
}

FirstLayerMaps DisentangledDetectorImpl::forward_first_layer(const torch::Tensor& images,
                                                             BranchMask mask) {
  TORCH_CHECK(images.dim() == 4 && images.size(0) > 0, "forward_first_layer: empty batch");
  FirstLayerMaps out;
  out.f_b1 = e_b1->forward(images);
  if (cfg_.one_layer) {
    out.f1 = out.f_b1;
    return out;
  }
  out.f_di1 = e_dir1->forward(out.f_b1);
  if (mask.specific) out.f_ds1 = e_dsr1->forward(out.f_b1);
  out.f1 = out.f_b1 + out.f_di1;
  return out;
}

SecondLayerMaps DisentangledDetectorImpl::forward_second_layer(const torch::Tensor& f1,
                                                               BranchMask mask) {
  SecondLayerMaps out;
  out.f_b2 = e_b2->forward(f1);
  if (mask.invariant) out.f_di2 = e_dir2->forward(out.f_b2);
  if (mask.specific) out.f_ds2 = e_dsr2->forward(out.f_b2);
  return out;
}

DisentangledState DisentangledDetectorImpl::forward_all(const torch::Tensor& images) {
  auto l1 = forward_first_layer(images);
  auto l2 = forward_second_layer(l1.f1);
  return {l1.f_b1, l1.f_di1, l1.f_ds1, l1.f1, l2.f_b2, l2.f_di2, l2.f_ds2};
}

RpnOutput DisentangledDetectorImpl::rpn_forward(const torch::Tensor& f_di2) {
  return rpn->forward(f_di2);
}

ProposalSet DisentangledDetectorImpl::select_proposals(const RpnOutput& out, int64_t top_k,
                                                       int64_t image_height,
                                                       int64_t image_width) const {
  TORCH_CHECK(top_k >= 1, "top_k must be at least 1");
  torch::NoGradGuard guard;
  const BoxCoder coder;
  std::vector<ProposalSet> parts;
  const int64_t batch = out.logits.size(0);
  for (int64_t b = 0; b < batch; ++b) {
    auto scores = torch::sigmoid(out.logits[b].detach());
    auto boxes = coder.decode(out.anchors, out.deltas[b].detach());
    boxes = torch::stack({boxes.select(1, 0).clamp(0, image_width), boxes.select(1, 1).clamp(0, image_height),
                          boxes.select(1, 2).clamp(0, image_width), boxes.select(1, 3).clamp(0, image_height)},
                         1);
    auto valid = ((boxes.select(1, 2) - boxes.select(1, 0)) >= 1.0) &
                 ((boxes.select(1, 3) - boxes.select(1, 1)) >= 1.0);
    auto idx = valid.nonzero().squeeze(1);
    boxes = boxes.index_select(0, idx);
    scores = scores.index_select(0, idx);
    auto keep = nms(boxes, scores, cfg_.rpn_nms);
    if (keep.size(0) > top_k) keep = keep.narrow(0, 0, top_k);
    parts.push_back({boxes.index_select(0, keep), scores.index_select(0, keep),
                     torch::full({keep.size(0)}, b, torch::kLong)});
  }
  return ProposalSet::concat(parts);
}

ProposalSet DisentangledDetectorImpl::propose(const torch::Tensor& f_di2, int64_t top_k,
                                              int64_t image_height, int64_t image_width) {
  return select_proposals(rpn_forward(f_di2), top_k, image_height, image_width);
}

RoIFeatures DisentangledDetectorImpl::align(const torch::Tensor& f2_map, const ProposalSet& proposals,
                                            Branch branch) const {
  return roi_align(f2_map, proposals, cfg_.roi_size, static_cast<double>(cfg_.stride2()), branch);
}

DetectionOutput DisentangledDetectorImpl::detect(const std::string& head, const RoIFeatures& rois) {
  TORCH_CHECK(rois.size() > 0, "detect: no RoIs");
  if (head == "d_b") return d_b->forward(rois.data);
  if (head == "d_di") return d_di->forward(rois.data);
  throw std::invalid_argument("unknown detection head '" + head + "'");
}

torch::Tensor domain_logit(DomainClassifier& classifier, const torch::Tensor& fmap, double grl_lambda,
                           bool reverse) {
  return classifier->forward(reverse ? grl(fmap, grl_lambda) : fmap);
}

torch::Tensor domain_probability(DomainClassifier& classifier, const torch::Tensor& fmap,
                                 double grl_lambda, bool reverse) {
  return torch::sigmoid(domain_logit(classifier, fmap, grl_lambda, reverse)).clamp(1e-7, 1.0 - 1e-7);
}

DomainClassifier& DisentangledDetectorImpl::domain_classifier(const std::string& name) {
  if (name == "c_b1") return c_b1;
  if (name == "c_ds1") return c_ds1;
  if (name == "c_b2") return c_b2;
  if (name == "c_ds2") return c_ds2;
  throw std::invalid_argument("unknown domain classifier '" + name + "'");
}

torch::Tensor DisentangledDetectorImpl::classify_domain(const std::string& classifier,
                                                        const torch::Tensor& fmap,
                                                        double grl_lambda, bool reverse) {
  return domain_probability(domain_classifier(classifier), fmap, grl_lambda, reverse);
}

torch::Tensor DisentangledDetectorImpl::classify_domain_logit(const std::string& classifier,
                                                              const torch::Tensor& fmap,
                                                              double grl_lambda, bool reverse) {
  return domain_logit(domain_classifier(classifier), fmap, grl_lambda, reverse);
}

RoIFeatures DisentangledDetectorImpl::reconstruct(const RoIFeatures& a_di, const RoIFeatures& a_ds) {
  if (a_di.size() != a_ds.size()) {
    throw std::invalid_argument("reconstruct: proposal counts differ");
  }
  TORCH_CHECK(a_di.data.sizes() == a_ds.data.sizes(), "reconstruct: crop shapes differ");
  return {r->forward(torch::cat({a_di.data, a_ds.data}, 1)), Branch::kReconstructed};
}

}  // namespace disdet
