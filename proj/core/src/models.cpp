#include "idd/models.hpp"

#include <cstring>
#include <random>
#include <stdexcept>

namespace idd::models {

std::string to_string(Role role) { return role == Role::kTeacher ? "teacher" : "student"; }

Role role_from_string(const std::string& name) {
  if (name == "teacher") return Role::kTeacher;
  if (name == "student") return Role::kStudent;
  throw std::invalid_argument("unknown model role '" + name + "'");
}

ModelSpec ModelSpec::default_teacher(int num_classes) {
  return ModelSpec{Role::kTeacher, {16, 32, 32, 32, 32, 32}, num_classes, 32, true};
}

ModelSpec ModelSpec::default_student(int num_classes) {
  return ModelSpec{Role::kStudent, {8, 16, 16}, num_classes, 16, false};
}

void ModelSpec::validate() const {
  if (channel_widths.empty()) throw std::invalid_argument("ModelSpec: channel_widths is empty");
  for (int w : channel_widths) {
    if (w <= 0) throw std::invalid_argument("ModelSpec: channel widths must be positive");
  }
  if (num_classes < 2) throw std::invalid_argument("ModelSpec: num_classes must be >= 2");
  if (feature_dim != channel_widths.back()) {
    throw std::invalid_argument("ModelSpec: declared feature_dim " + std::to_string(feature_dim) +
                                " does not match the constructed head width " +
                                std::to_string(channel_widths.back()));
  }
  if (pyramid_pooling && feature_dim < 4) {
    throw std::invalid_argument("ModelSpec: pyramid pooling needs feature_dim >= 4");
  }
}

int ModelSpec::downsample_factor() const {
  return channel_widths.size() >= 2 ? 4 : 2;
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"role", to_string(s.role)},
                     {"channel_widths", s.channel_widths},
                     {"num_classes", s.num_classes},
                     {"feature_dim", s.feature_dim},
                     {"pyramid_pooling", s.pyramid_pooling}};
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.role = role_from_string(j.at("role").get<std::string>());
  s.channel_widths = j.at("channel_widths").get<std::vector<int>>();
  s.num_classes = j.at("num_classes").get<int>();
  s.feature_dim = j.at("feature_dim").get<int>();
  s.pyramid_pooling = j.value("pyramid_pooling", false);
}

template <typename T>
ParamCount count_params(std::span<nn::Param<T>* const> params) {
  ParamCount c;
  for (const auto* p : params) (p->frozen ? c.frozen : c.trainable) += p->size();
  return c;
}

template <typename T>
Model<T>::Model(ModelSpec spec, std::uint64_t init_seed)
    : spec_(std::move(spec)), init_seed_(init_seed), backbone_(std::make_unique<nn::Sequential<T>>()) {
  spec_.validate();
  std::mt19937_64 rng(init_seed);
  int in = 3;
  for (std::size_t i = 0; i < spec_.channel_widths.size(); ++i) {
    const int out = spec_.channel_widths[i];
    const int dilation = i >= 4 ? 2 : 1;
    nn::ConvOptions opt{3, i < 2 ? 2 : 1, dilation, dilation, true};
    auto conv = std::make_unique<nn::Conv2d<T>>(in, out, opt, "block" + std::to_string(i));
    conv->init(rng);
    backbone_->add(std::move(conv));
    backbone_->add(std::make_unique<nn::Relu<T>>());
    in = out;
  }
  if (spec_.pyramid_pooling) {
    auto ppm = std::make_unique<nn::PyramidPooling<T>>(in, in / 4, std::vector<int>{1, 2, 4}, "context");
    ppm->init(rng);
    const int cat = ppm->output_channels();
    backbone_->add(std::move(ppm));
    auto fuse = std::make_unique<nn::Conv2d<T>>(cat, spec_.feature_dim, nn::ConvOptions{}, "fuse");
    fuse->init(rng);
    backbone_->add(std::move(fuse));
    backbone_->add(std::make_unique<nn::Relu<T>>());
  }
  classifier_ = std::make_unique<nn::Conv2d<T>>(spec_.feature_dim, spec_.num_classes,
                                                nn::ConvOptions{1, 1, 0, 1, true}, "classifier");
  classifier_->init(rng);
  backbone_->collect_params(params_);
  classifier_->collect_params(params_);
}

template <typename T>
ForwardOutput<T> Model<T>::forward(const Tensor<T>& images, bool cache) {
  if (images.c() != 3) throw std::invalid_argument("Model::forward: expected 3 input channels");
  const int f = spec_.downsample_factor();
  if (images.h() % f != 0 || images.w() % f != 0) {
    throw std::invalid_argument("Model::forward: input " + std::to_string(images.h()) + "x" +
                                std::to_string(images.w()) + " not divisible by " + std::to_string(f));
  }
  const bool keep = cache && !frozen_;
  Tensor<T> low = backbone_->forward(images, keep);
  if (keep) {
    low_h_ = low.h();
    low_w_ = low.w();
  }
  ForwardOutput<T> out;
  out.features = nn::upsample_bilinear(low, images.h(), images.w());
  out.logits = classifier_->forward(out.features, keep);
  return out;
}

template <typename T>
void Model<T>::backward(const Tensor<T>* grad_features, const Tensor<T>& grad_logits) {
  if (frozen_) throw std::logic_error("Model::backward on a frozen model");
  Tensor<T> g = classifier_->backward(grad_logits);
  if (grad_features) {
    if (grad_features->shape() != g.shape()) {
      throw std::invalid_argument("Model::backward: feature gradient shape " +
                                  to_string(grad_features->shape()) + " != " + to_string(g.shape()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += grad_features->data()[i];
  }
  backbone_->backward(nn::upsample_bilinear_backward(g, low_h_, low_w_));
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto* p : params_) p->grad.fill(T(0));
}

template <typename T>
void Model<T>::freeze() {
  frozen_ = true;
  for (auto* p : params_) p->frozen = true;
}

template <typename T>
std::vector<T> Model<T>::flat_params() const {
  std::vector<T> flat;
  for (const auto* p : params_) flat.insert(flat.end(), p->value.data(), p->value.data() + p->size());
  return flat;
}

template <typename T>
void Model<T>::set_flat_params(std::span<const T> flat) {
  const std::size_t total = param_count().total();
  if (flat.size() != total) {
    throw std::invalid_argument("Model::set_flat_params: expected " + std::to_string(total) +
                                " values, got " + std::to_string(flat.size()));
  }
  std::size_t off = 0;
  for (auto* p : params_) {
    std::copy(flat.begin() + off, flat.begin() + off + p->size(), p->value.data());
    off += p->size();
  }
}

template <typename T>
Model<T> clone(const Model<T>& m) {
  Model<T> copy(m.spec(), m.init_seed());
  const auto flat = m.flat_params();
  copy.set_flat_params(flat);
  if (m.frozen()) copy.freeze();
  return copy;
}

template <typename T>
std::uint64_t param_hash(const Model<T>& m) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (T v : m.flat_params()) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

template class Model<float>;
template class Model<double>;
template ParamCount count_params<float>(std::span<nn::Param<float>* const>);
template ParamCount count_params<double>(std::span<nn::Param<double>* const>);
template Model<float> clone(const Model<float>&);
template Model<double> clone(const Model<double>&);
template std::uint64_t param_hash(const Model<float>&);
template std::uint64_t param_hash(const Model<double>&);

}  // namespace idd::models
