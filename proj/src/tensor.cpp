#include "maskform/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace maskform {

int shape_numel(const Shape& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

namespace {

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

void check_shape_valid(const std::string& op, const Shape& shape) {
  if (shape.empty()) shape_error(op, "empty shape");
  for (int d : shape) {
    if (d <= 0) shape_error(op, "non-positive dim in shape " + shape_str(shape));
  }
}

void check_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

// Decompose shape into (outer, n, inner) around axis.
struct AxisSplit {
  int outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const std::string& op, const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    shape_error(op, "axis " + std::to_string(axis) + " out of range for " +
                        shape_str(shape));
  }
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  s.n = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  if (s.n == 0) throw std::domain_error(op + ": empty axis");
  return s;
}

thread_local Graph* g_active_graph = nullptr;

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_graph == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void record_unary(Op op, const Tensor& x, const Tensor& out, int iattr = 0,
                  double c0 = 0.0, double c1 = 0.0) {
  Node node;
  node.op = op;
  node.inputs = {g_active_graph->ensure_tracked(x)};
  node.saved = {x};
  node.out = out;
  node.iattr = iattr;
  node.c0 = c0;
  node.c1 = c1;
  g_active_graph->record(std::move(node));
}

void record_binary(Op op, const Tensor& a, const Tensor& b, const Tensor& out,
                   int iattr = 0) {
  Node node;
  node.op = op;
  node.inputs = {g_active_graph->ensure_tracked(a),
                 g_active_graph->ensure_tracked(b)};
  node.saved = {a, b};
  node.out = out;
  node.iattr = iattr;
  g_active_graph->record(std::move(node));
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape_valid("zeros", shape);
  Tensor t;
  t.storage_ = std::make_shared<Storage>();
  t.storage_->shape = std::move(shape);
  t.storage_->data.assign(static_cast<size_t>(shape_numel(t.storage_->shape)),
                          0.0);
  t.storage_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.vec().begin(), t.vec().end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  check_shape_valid("from_data", shape);
  if (static_cast<int>(data.size()) != shape_numel(shape)) {
    shape_error("from_data", "data size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.storage_ = std::make_shared<Storage>();
  t.storage_->shape = std::move(shape);
  t.storage_->data = std::move(data);
  t.storage_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    shape_error("item", "tensor " + shape_str(shape()) + " is not a scalar");
  }
  return storage_->data[0];
}

double Tensor::at(int i, int j) const {
  return storage_->data[static_cast<size_t>(i) * dim(1) + j];
}
double& Tensor::at(int i, int j) {
  return storage_->data[static_cast<size_t>(i) * dim(1) + j];
}
double Tensor::at(int i, int j, int k) const {
  return storage_->data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
}
double& Tensor::at(int i, int j, int k) {
  return storage_->data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
}

Tensor& Tensor::set_requires_grad(bool value) {
  storage_->requires_grad = value;
  return *this;
}

std::vector<double>& Tensor::mutable_grad() {
  if (!storage_->grad) {
    storage_->grad =
        std::make_unique<std::vector<double>>(storage_->data.size(), 0.0);
  }
  return *storage_->grad;
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
  auto& buf = mutable_grad();
  for (size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

Tensor Tensor::clone() const {
  return from_data(shape(), vec(), false);
}

bool Tensor::all_finite() const {
  for (double v : storage_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---- Graph -----------------------------------------------------------------

void Graph::clear() {
  nodes_.clear();
  by_storage_.clear();
  grads_.clear();
}

int Graph::lookup(const Tensor& t) const {
  auto it = by_storage_.find(t.storage_id());
  return it == by_storage_.end() ? -1 : it->second;
}

int Graph::ensure_tracked(const Tensor& t) {
  int id = lookup(t);
  if (id >= 0) return id;
  Node leaf;
  leaf.op = Op::kLeaf;
  leaf.out = t;
  nodes_.push_back(std::move(leaf));
  id = static_cast<int>(nodes_.size()) - 1;
  by_storage_[t.storage_id()] = id;
  return id;
}

int Graph::record(Node node) {
  const void* key = node.out.storage_id();
  nodes_.push_back(std::move(node));
  int id = static_cast<int>(nodes_.size()) - 1;
  by_storage_[key] = id;
  return id;
}

std::vector<double>& Graph::grad_buffer(int id) {
  if (grads_[static_cast<size_t>(id)].empty()) {
    grads_[static_cast<size_t>(id)].assign(
        static_cast<size_t>(nodes_[static_cast<size_t>(id)].out.numel()), 0.0);
  }
  return grads_[static_cast<size_t>(id)];
}

void Graph::backward(const Tensor& loss, bool write_leaf_grads) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                shape_str(loss.shape()));
  }
  int loss_id = lookup(loss);
  if (loss_id < 0) {
    throw std::invalid_argument("backward: loss is not tracked by this graph");
  }
  grads_.assign(nodes_.size(), {});
  grad_buffer(loss_id)[0] = 1.0;
  for (int id = loss_id; id >= 0; --id) {
    if (grads_[static_cast<size_t>(id)].empty()) continue;  // unreachable node
    backprop_node(id);
  }
  if (write_leaf_grads) {
    for (size_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.op == Op::kLeaf && n.out.requires_grad() && !grads_[id].empty()) {
        n.out.accumulate_grad(grads_[id]);
      }
    }
  }
}

const std::vector<double>* Graph::grad_of(const Tensor& t) const {
  int id = lookup(t);
  if (id < 0 || grads_.empty() ||
      grads_[static_cast<size_t>(id)].empty())
    return nullptr;
  return &grads_[static_cast<size_t>(id)];
}

// ---- Recording scope -------------------------------------------------------

Recording::Recording(Graph& g) : prev_(g_active_graph) { g_active_graph = &g; }
Recording::~Recording() { g_active_graph = prev_; }

Graph* active_graph() { return g_active_graph; }

void backward(const Tensor& loss, Graph& graph) { graph.backward(loss); }

// ---- elementwise and reduction forwards ------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
  if (should_record({&a, &b})) record_binary(Op::kAdd, a, b, out);
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < a.numel(); ++i) po[i] = pa[i] - pb[i];
  if (should_record({&a, &b})) record_binary(Op::kSub, a, b, out);
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < a.numel(); ++i) po[i] = pa[i] * pb[i];
  if (should_record({&a, &b})) record_binary(Op::kMul, a, b, out);
  return out;
}

Tensor divide(const Tensor& a, const Tensor& b) {
  check_same_shape("divide", a, b);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < a.numel(); ++i) {
    if (pb[i] == 0.0) throw std::domain_error("divide: zero denominator");
    po[i] = pa[i] / pb[i];
  }
  if (should_record({&a, &b})) record_binary(Op::kDiv, a, b, out);
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", "incompatible shapes " + shape_str(a.shape()) +
                              " x " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < m; ++i) {
    double* orow = po + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = pa[static_cast<size_t>(i) * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (should_record({&a, &b})) record_binary(Op::kMatmul, a, b, out);
  return out;
}

namespace {

// Shared conv kernel; ksize is 1 or 3, pad = ksize/2.
Tensor conv_forward(const std::string& name, const Tensor& x, const Tensor& w,
                    int ksize, int stride) {
  if (x.ndim() != 3) shape_error(name, "input must be (C,H,W), got " + shape_str(x.shape()));
  const int cin = x.dim(0), h = x.dim(1), wdt = x.dim(2);
  int cout;
  if (ksize == 1) {
    if (w.ndim() != 2 || w.dim(1) != cin) {
      shape_error(name, "weight " + shape_str(w.shape()) +
                            " incompatible with input " + shape_str(x.shape()));
    }
    cout = w.dim(0);
  } else {
    if (w.ndim() != 4 || w.dim(1) != cin || w.dim(2) != 3 || w.dim(3) != 3) {
      shape_error(name, "weight " + shape_str(w.shape()) +
                            " incompatible with input " + shape_str(x.shape()));
    }
    cout = w.dim(0);
  }
  if (stride != 1 && stride != 2) shape_error(name, "stride must be 1 or 2");
  const int pad = ksize / 2;
  const int ho = (h + 2 * pad - ksize) / stride + 1;
  const int wo = (wdt + 2 * pad - ksize) / stride + 1;
  Tensor out = Tensor::zeros({cout, ho, wo});
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.data();
  for (int co = 0; co < cout; ++co) {
    double* oplane = po + static_cast<size_t>(co) * ho * wo;
    for (int ci = 0; ci < cin; ++ci) {
      const double* xplane = px + static_cast<size_t>(ci) * h * wdt;
      for (int kh = 0; kh < ksize; ++kh) {
        for (int kw = 0; kw < ksize; ++kw) {
          const double wv =
              ksize == 1
                  ? pw[static_cast<size_t>(co) * cin + ci]
                  : pw[((static_cast<size_t>(co) * cin + ci) * 3 + kh) * 3 + kw];
          if (wv == 0.0) continue;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + kh - pad;
            if (iy < 0 || iy >= h) continue;
            const double* xrow = xplane + static_cast<size_t>(iy) * wdt;
            double* orow = oplane + static_cast<size_t>(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kw - pad;
              if (ix < 0 || ix >= wdt) continue;
              orow[ox] += wv * xrow[ix];
            }
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

Tensor conv2d_3x3(const Tensor& x, const Tensor& w, int stride) {
  Tensor out = conv_forward("conv2d_3x3", x, w, 3, stride);
  if (should_record({&x, &w})) record_binary(Op::kConv3x3, x, w, out, stride);
  return out;
}

Tensor conv2d_1x1(const Tensor& x, const Tensor& w) {
  Tensor out = conv_forward("conv2d_1x1", x, w, 1, 1);
  if (should_record({&x, &w})) record_binary(Op::kConv1x1, x, w, out, 1);
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < x.numel(); ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
  if (should_record({&x})) record_unary(Op::kRelu, x, out);
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < x.numel(); ++i) {
    const double v = px[i];
    po[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                     : std::exp(v) / (1.0 + std::exp(v));
  }
  if (should_record({&x})) record_unary(Op::kSigmoid, x, out);
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  AxisSplit s = split_axis("softmax", x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int o = 0; o < s.outer; ++o) {
    for (int in = 0; in < s.inner; ++in) {
      const size_t base = static_cast<size_t>(o) * s.n * s.inner + in;
      double mx = px[base];
      for (int i = 1; i < s.n; ++i)
        mx = std::max(mx, px[base + static_cast<size_t>(i) * s.inner]);
      double denom = 0.0;
      for (int i = 0; i < s.n; ++i) {
        const double e = std::exp(px[base + static_cast<size_t>(i) * s.inner] - mx);
        po[base + static_cast<size_t>(i) * s.inner] = e;
        denom += e;
      }
      for (int i = 0; i < s.n; ++i)
        po[base + static_cast<size_t>(i) * s.inner] /= denom;
    }
  }
  if (should_record({&x})) record_unary(Op::kSoftmax, x, out, axis);
  return out;
}

Tensor log_softmax(const Tensor& x, int axis) {
  AxisSplit s = split_axis("log_softmax", x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int o = 0; o < s.outer; ++o) {
    for (int in = 0; in < s.inner; ++in) {
      const size_t base = static_cast<size_t>(o) * s.n * s.inner + in;
      double mx = px[base];
      for (int i = 1; i < s.n; ++i)
        mx = std::max(mx, px[base + static_cast<size_t>(i) * s.inner]);
      double denom = 0.0;
      for (int i = 0; i < s.n; ++i)
        denom += std::exp(px[base + static_cast<size_t>(i) * s.inner] - mx);
      const double lse = mx + std::log(denom);
      for (int i = 0; i < s.n; ++i)
        po[base + static_cast<size_t>(i) * s.inner] =
            px[base + static_cast<size_t>(i) * s.inner] - lse;
    }
  }
  if (should_record({&x})) record_unary(Op::kLogSoftmax, x, out, axis);
  return out;
}

Tensor log(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < x.numel(); ++i) {
    if (px[i] <= 0.0) throw std::domain_error("log: non-positive input");
    po[i] = std::log(px[i]);
  }
  if (should_record({&x})) record_unary(Op::kLog, x, out);
  return out;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < x.numel(); ++i)
    po[i] = std::min(std::max(px[i], lo), hi);
  if (should_record({&x})) record_unary(Op::kClamp, x, out, 0, lo, hi);
  return out;
}

Tensor mean_all(const Tensor& x) {
  double acc = 0.0;
  const double* px = x.data();
  for (int i = 0; i < x.numel(); ++i) acc += px[i];
  Tensor out = Tensor::scalar(acc / x.numel());
  if (should_record({&x})) record_unary(Op::kMeanAll, x, out);
  return out;
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  const double* px = x.data();
  for (int i = 0; i < x.numel(); ++i) acc += px[i];
  Tensor out = Tensor::scalar(acc);
  if (should_record({&x})) record_unary(Op::kSumAll, x, out);
  return out;
}

Tensor upsample_nearest_2x(const Tensor& x) {
  if (x.ndim() != 3) {
    shape_error("upsample_nearest_2x", "input must be (C,H,W), got " +
                                           shape_str(x.shape()));
  }
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out = Tensor::zeros({c, 2 * h, 2 * w});
  const double* px = x.data();
  double* po = out.data();
  for (int ci = 0; ci < c; ++ci) {
    for (int y = 0; y < 2 * h; ++y) {
      const double* xrow =
          px + (static_cast<size_t>(ci) * h + y / 2) * w;
      double* orow = po + (static_cast<size_t>(ci) * 2 * h + y) * 2 * w;
      for (int xo = 0; xo < 2 * w; ++xo) orow[xo] = xrow[xo / 2];
    }
  }
  if (should_record({&x})) record_unary(Op::kUpsample2x, x, out);
  return out;
}

Tensor layer_norm(const Tensor& x, int axis) {
  constexpr double kEps = 1e-5;
  AxisSplit s = split_axis("layer_norm", x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int o = 0; o < s.outer; ++o) {
    for (int in = 0; in < s.inner; ++in) {
      const size_t base = static_cast<size_t>(o) * s.n * s.inner + in;
      double mean = 0.0;
      for (int i = 0; i < s.n; ++i)
        mean += px[base + static_cast<size_t>(i) * s.inner];
      mean /= s.n;
      double var = 0.0;
      for (int i = 0; i < s.n; ++i) {
        const double d = px[base + static_cast<size_t>(i) * s.inner] - mean;
        var += d * d;
      }
      var /= s.n;
      const double inv = 1.0 / std::sqrt(var + kEps);
      for (int i = 0; i < s.n; ++i)
        po[base + static_cast<size_t>(i) * s.inner] =
            (px[base + static_cast<size_t>(i) * s.inner] - mean) * inv;
    }
  }
  if (should_record({&x})) record_unary(Op::kLayerNorm, x, out, axis);
  return out;
}

Tensor scale_by_constant(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < x.numel(); ++i) po[i] = px[i] * c;
  if (should_record({&x})) record_unary(Op::kScale, x, out, 0, c);
  return out;
}

Tensor add_constant(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < x.numel(); ++i) po[i] = px[i] + c;
  if (should_record({&x})) record_unary(Op::kAddConst, x, out, 0, c);
  return out;
}

Tensor pow_constant(const Tensor& x, double p) {
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < x.numel(); ++i) {
    if (px[i] < 0.0) throw std::domain_error("pow_constant: negative base");
    po[i] = std::pow(px[i], p);
  }
  if (should_record({&x})) record_unary(Op::kPowConst, x, out, 0, p);
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) shape_error("concat", "no inputs");
  const Shape& ref = xs[0].shape();
  if (axis < 0 || axis >= static_cast<int>(ref.size()))
    shape_error("concat", "axis out of range");
  int total_axis = 0;
  for (const Tensor& t : xs) {
    if (t.ndim() != static_cast<int>(ref.size()))
      shape_error("concat", "rank mismatch");
    for (int d = 0; d < t.ndim(); ++d) {
      if (d != axis && t.dim(d) != ref[static_cast<size_t>(d)])
        shape_error("concat", "shape mismatch on non-concat axis");
    }
    total_axis += t.dim(axis);
  }
  Shape out_shape = ref;
  out_shape[static_cast<size_t>(axis)] = total_axis;
  Tensor out = Tensor::zeros(out_shape);
  AxisSplit so = split_axis("concat", out_shape, axis);
  double* po = out.data();
  int offset = 0;
  for (const Tensor& t : xs) {
    AxisSplit st = split_axis("concat", t.shape(), axis);
    const double* pt = t.data();
    for (int o = 0; o < st.outer; ++o) {
      for (int i = 0; i < st.n; ++i) {
        const double* src =
            pt + (static_cast<size_t>(o) * st.n + i) * st.inner;
        double* dst =
            po + (static_cast<size_t>(o) * so.n + offset + i) * so.inner;
        std::copy(src, src + st.inner, dst);
      }
    }
    offset += st.n;
  }
  bool rec = false;
  if (g_active_graph != nullptr) {
    for (const Tensor& t : xs) rec = rec || t.requires_grad();
  }
  if (rec) {
    Node node;
    node.op = Op::kConcat;
    for (const Tensor& t : xs) {
      node.inputs.push_back(g_active_graph->ensure_tracked(t));
      node.saved.push_back(t);
    }
    node.out = out;
    node.iattr = axis;
    g_active_graph->record(std::move(node));
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.ndim() != 2)
    shape_error("transpose", "input must be 2-D, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      po[static_cast<size_t>(j) * m + i] = px[static_cast<size_t>(i) * n + j];
  if (should_record({&x})) record_unary(Op::kTranspose, x, out);
  return out;
}

Tensor broadcast_add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.ndim() != 1 || bias.dim(0) != x.dim(0)) {
    shape_error("broadcast_add_bias",
                "bias " + shape_str(bias.shape()) + " does not match axis 0 of " +
                    shape_str(x.shape()));
  }
  const int c = x.dim(0);
  const int inner = x.numel() / c;
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  const double* pb = bias.data();
  double* po = out.data();
  for (int ci = 0; ci < c; ++ci) {
    const double b = pb[ci];
    for (int i = 0; i < inner; ++i)
      po[static_cast<size_t>(ci) * inner + i] =
          px[static_cast<size_t>(ci) * inner + i] + b;
  }
  if (should_record({&x, &bias})) record_binary(Op::kBiasAdd, x, bias, out);
  return out;
}

Tensor channel_affine(const Tensor& x, const Tensor& scale,
                      const Tensor& shift) {
  if (scale.ndim() != 1 || scale.dim(0) != x.dim(0) ||
      shift.shape() != scale.shape()) {
    shape_error("channel_affine", "scale/shift must be 1-D of length dim0");
  }
  const int c = x.dim(0);
  const int inner = x.numel() / c;
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  const double* ps = scale.data();
  const double* pt = shift.data();
  double* po = out.data();
  for (int ci = 0; ci < c; ++ci) {
    for (int i = 0; i < inner; ++i)
      po[static_cast<size_t>(ci) * inner + i] =
          ps[ci] * px[static_cast<size_t>(ci) * inner + i] + pt[ci];
  }
  if (g_active_graph != nullptr &&
      (x.requires_grad() || scale.requires_grad() || shift.requires_grad())) {
    Node node;
    node.op = Op::kChannelAffine;
    node.inputs = {g_active_graph->ensure_tracked(x),
                   g_active_graph->ensure_tracked(scale),
                   g_active_graph->ensure_tracked(shift)};
    node.saved = {x, scale, shift};
    node.out = out;
    g_active_graph->record(std::move(node));
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_shape_valid("reshape", shape);
  if (shape_numel(shape) != x.numel()) {
    shape_error("reshape", "cannot reshape " + shape_str(x.shape()) + " to " +
                               shape_str(shape));
  }
  Tensor out = Tensor::from_data(shape, x.vec());
  if (should_record({&x})) record_unary(Op::kReshape, x, out);
  return out;
}

Tensor hwc_to_chw(const Tensor& x) {
  if (x.ndim() != 3)
    shape_error("hwc_to_chw", "input must be (H,W,C), got " + shape_str(x.shape()));
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor out = Tensor::zeros({c, h, w});
  const double* px = x.data();
  double* po = out.data();
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int ci = 0; ci < c; ++ci)
        po[(static_cast<size_t>(ci) * h + y) * w + xx] =
            px[(static_cast<size_t>(y) * w + xx) * c + ci];
  if (should_record({&x})) record_unary(Op::kHwcToChw, x, out);
  return out;
}

Tensor select0(const Tensor& x, int index) {
  if (x.ndim() < 2) shape_error("select0", "input must have rank >= 2");
  if (index < 0 || index >= x.dim(0))
    shape_error("select0", "index " + std::to_string(index) + " out of range");
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  const int inner = shape_numel(out_shape);
  std::vector<double> data(x.data() + static_cast<size_t>(index) * inner,
                           x.data() + static_cast<size_t>(index + 1) * inner);
  Tensor out = Tensor::from_data(out_shape, std::move(data));
  if (should_record({&x})) record_unary(Op::kSelect0, x, out, index);
  return out;
}

// ---- backward --------------------------------------------------------------

void Graph::backprop_node(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.op == Op::kLeaf) return;
  const std::vector<double>& gy = grads_[static_cast<size_t>(id)];
  auto gin = [&](int slot) -> std::vector<double>& {
    return grad_buffer(n.inputs[static_cast<size_t>(slot)]);
  };
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd: {
      auto& ga = gin(0);
      auto& gb = gin(1);
      for (size_t i = 0; i < gy.size(); ++i) {
        ga[i] += gy[i];
        gb[i] += gy[i];
      }
      break;
    }
    case Op::kSub: {
      auto& ga = gin(0);
      auto& gb = gin(1);
      for (size_t i = 0; i < gy.size(); ++i) {
        ga[i] += gy[i];
        gb[i] -= gy[i];
      }
      break;
    }
    case Op::kMul: {
      const double* a = n.saved[0].data();
      const double* b = n.saved[1].data();
      auto& ga = gin(0);
      auto& gb = gin(1);
      for (size_t i = 0; i < gy.size(); ++i) {
        ga[i] += gy[i] * b[i];
        gb[i] += gy[i] * a[i];
      }
      break;
    }
    case Op::kDiv: {
      const double* a = n.saved[0].data();
      const double* b = n.saved[1].data();
      auto& ga = gin(0);
      auto& gb = gin(1);
      for (size_t i = 0; i < gy.size(); ++i) {
        ga[i] += gy[i] / b[i];
        gb[i] -= gy[i] * a[i] / (b[i] * b[i]);
      }
      break;
    }
    case Op::kMatmul: {
      const Tensor& a = n.saved[0];
      const Tensor& b = n.saved[1];
      const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
      auto& ga = gin(0);
      auto& gb = gin(1);
      const double* pa = a.data();
      const double* pb = b.data();
      // dA = dY * B^T ; dB = A^T * dY
      for (int i = 0; i < m; ++i) {
        const double* gyrow = gy.data() + static_cast<size_t>(i) * nn;
        for (int kk = 0; kk < k; ++kk) {
          const double* brow = pb + static_cast<size_t>(kk) * nn;
          double acc = 0.0;
          for (int j = 0; j < nn; ++j) acc += gyrow[j] * brow[j];
          ga[static_cast<size_t>(i) * k + kk] += acc;
        }
      }
      for (int kk = 0; kk < k; ++kk) {
        double* gbrow = gb.data() + static_cast<size_t>(kk) * nn;
        for (int i = 0; i < m; ++i) {
          const double av = pa[static_cast<size_t>(i) * k + kk];
          if (av == 0.0) continue;
          const double* gyrow = gy.data() + static_cast<size_t>(i) * nn;
          for (int j = 0; j < nn; ++j) gbrow[j] += av * gyrow[j];
        }
      }
      break;
    }
    case Op::kConv3x3:
    case Op::kConv1x1: {
      const Tensor& x = n.saved[0];
      const Tensor& w = n.saved[1];
      const int ksize = n.op == Op::kConv3x3 ? 3 : 1;
      const int stride = n.iattr;
      const int pad = ksize / 2;
      const int cin = x.dim(0), h = x.dim(1), wdt = x.dim(2);
      const int cout = n.out.dim(0), ho = n.out.dim(1), wo = n.out.dim(2);
      auto& gx = gin(0);
      auto& gw = gin(1);
      const double* px = x.data();
      const double* pw = w.data();
      for (int co = 0; co < cout; ++co) {
        const double* gplane = gy.data() + static_cast<size_t>(co) * ho * wo;
        for (int ci = 0; ci < cin; ++ci) {
          const double* xplane = px + static_cast<size_t>(ci) * h * wdt;
          double* gxplane = gx.data() + static_cast<size_t>(ci) * h * wdt;
          for (int kh = 0; kh < ksize; ++kh) {
            for (int kw = 0; kw < ksize; ++kw) {
              const size_t widx =
                  ksize == 1
                      ? static_cast<size_t>(co) * cin + ci
                      : ((static_cast<size_t>(co) * cin + ci) * 3 + kh) * 3 + kw;
              const double wv = pw[widx];
              double wacc = 0.0;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * stride + kh - pad;
                if (iy < 0 || iy >= h) continue;
                const double* grow = gplane + static_cast<size_t>(oy) * wo;
                const double* xrow = xplane + static_cast<size_t>(iy) * wdt;
                double* gxrow = gxplane + static_cast<size_t>(iy) * wdt;
                for (int ox = 0; ox < wo; ++ox) {
                  const int ix = ox * stride + kw - pad;
                  if (ix < 0 || ix >= wdt) continue;
                  const double g = grow[ox];
                  gxrow[ix] += wv * g;
                  wacc += xrow[ix] * g;
                }
              }
              gw[widx] += wacc;
            }
          }
        }
      }
      break;
    }
    case Op::kRelu: {
      const double* x = n.saved[0].data();
      auto& gx = gin(0);
      for (size_t i = 0; i < gy.size(); ++i)
        if (x[i] > 0.0) gx[i] += gy[i];
      break;
    }
    case Op::kSigmoid: {
      const double* y = n.out.data();
      auto& gx = gin(0);
      for (size_t i = 0; i < gy.size(); ++i)
        gx[i] += gy[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case Op::kSoftmax: {
      AxisSplit s = split_axis("softmax", n.out.shape(), n.iattr);
      const double* y = n.out.data();
      auto& gx = gin(0);
      for (int o = 0; o < s.outer; ++o) {
        for (int in = 0; in < s.inner; ++in) {
          const size_t base = static_cast<size_t>(o) * s.n * s.inner + in;
          double dot = 0.0;
          for (int i = 0; i < s.n; ++i) {
            const size_t idx = base + static_cast<size_t>(i) * s.inner;
            dot += gy[idx] * y[idx];
          }
          for (int i = 0; i < s.n; ++i) {
            const size_t idx = base + static_cast<size_t>(i) * s.inner;
            gx[idx] += y[idx] * (gy[idx] - dot);
          }
        }
      }
      break;
    }
    case Op::kLogSoftmax: {
      AxisSplit s = split_axis("log_softmax", n.out.shape(), n.iattr);
      const double* y = n.out.data();  // log probabilities
      auto& gx = gin(0);
      for (int o = 0; o < s.outer; ++o) {
        for (int in = 0; in < s.inner; ++in) {
          const size_t base = static_cast<size_t>(o) * s.n * s.inner + in;
          double gsum = 0.0;
          for (int i = 0; i < s.n; ++i)
            gsum += gy[base + static_cast<size_t>(i) * s.inner];
          for (int i = 0; i < s.n; ++i) {
            const size_t idx = base + static_cast<size_t>(i) * s.inner;
            gx[idx] += gy[idx] - std::exp(y[idx]) * gsum;
          }
        }
      }
      break;
    }
    case Op::kLog: {
      const double* x = n.saved[0].data();
      auto& gx = gin(0);
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] / x[i];
      break;
    }
    case Op::kClamp: {
      const double* x = n.saved[0].data();
      auto& gx = gin(0);
      for (size_t i = 0; i < gy.size(); ++i)
        if (x[i] > n.c0 && x[i] < n.c1) gx[i] += gy[i];
      break;
    }
    case Op::kMeanAll: {
      auto& gx = gin(0);
      const double g = gy[0] / static_cast<double>(gx.size());
      for (double& v : gx) v += g;
      break;
    }
    case Op::kSumAll: {
      auto& gx = gin(0);
      const double g = gy[0];
      for (double& v : gx) v += g;
      break;
    }
    case Op::kUpsample2x: {
      const Tensor& x = n.saved[0];
      const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
      auto& gx = gin(0);
      for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < 2 * h; ++y) {
          const double* grow =
              gy.data() + (static_cast<size_t>(ci) * 2 * h + y) * 2 * w;
          double* gxrow = gx.data() + (static_cast<size_t>(ci) * h + y / 2) * w;
          for (int xo = 0; xo < 2 * w; ++xo) gxrow[xo / 2] += grow[xo];
        }
      }
      break;
    }
    case Op::kLayerNorm: {
      constexpr double kEps = 1e-5;
      const Tensor& x = n.saved[0];
      AxisSplit s = split_axis("layer_norm", x.shape(), n.iattr);
      const double* px = x.data();
      const double* y = n.out.data();
      auto& gx = gin(0);
      for (int o = 0; o < s.outer; ++o) {
        for (int in = 0; in < s.inner; ++in) {
          const size_t base = static_cast<size_t>(o) * s.n * s.inner + in;
          double mean = 0.0;
          for (int i = 0; i < s.n; ++i)
            mean += px[base + static_cast<size_t>(i) * s.inner];
          mean /= s.n;
          double var = 0.0;
          for (int i = 0; i < s.n; ++i) {
            const double d = px[base + static_cast<size_t>(i) * s.inner] - mean;
            var += d * d;
          }
          var /= s.n;
          const double inv = 1.0 / std::sqrt(var + kEps);
          double gmean = 0.0, gydot = 0.0;
          for (int i = 0; i < s.n; ++i) {
            const size_t idx = base + static_cast<size_t>(i) * s.inner;
            gmean += gy[idx];
            gydot += gy[idx] * y[idx];
          }
          gmean /= s.n;
          gydot /= s.n;
          for (int i = 0; i < s.n; ++i) {
            const size_t idx = base + static_cast<size_t>(i) * s.inner;
            gx[idx] += inv * (gy[idx] - gmean - y[idx] * gydot);
          }
        }
      }
      break;
    }
    case Op::kScale: {
      auto& gx = gin(0);
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * n.c0;
      break;
    }
    case Op::kAddConst: {
      auto& gx = gin(0);
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      break;
    }
    case Op::kPowConst: {
      const double* x = n.saved[0].data();
      auto& gx = gin(0);
      const double p = n.c0;
      for (size_t i = 0; i < gy.size(); ++i) {
        if (x[i] == 0.0) {
          // d/dx x^p at 0: 0 for p > 1, p for p == 1.
          if (p == 1.0) gx[i] += gy[i];
          continue;
        }
        gx[i] += gy[i] * p * std::pow(x[i], p - 1.0);
      }
      break;
    }
    case Op::kConcat: {
      AxisSplit so = split_axis("concat", n.out.shape(), n.iattr);
      int offset = 0;
      for (size_t slot = 0; slot < n.inputs.size(); ++slot) {
        AxisSplit st = split_axis("concat", n.saved[slot].shape(), n.iattr);
        auto& gx = gin(static_cast<int>(slot));
        for (int o = 0; o < st.outer; ++o) {
          for (int i = 0; i < st.n; ++i) {
            const double* src =
                gy.data() +
                (static_cast<size_t>(o) * so.n + offset + i) * so.inner;
            double* dst = gx.data() + (static_cast<size_t>(o) * st.n + i) * st.inner;
            for (int k = 0; k < st.inner; ++k) dst[k] += src[k];
          }
        }
        offset += st.n;
      }
      break;
    }
    case Op::kTranspose: {
      const int m = n.saved[0].dim(0), nn = n.saved[0].dim(1);
      auto& gx = gin(0);
      for (int j = 0; j < nn; ++j)
        for (int i = 0; i < m; ++i)
          gx[static_cast<size_t>(i) * nn + j] += gy[static_cast<size_t>(j) * m + i];
      break;
    }
    case Op::kBiasAdd: {
      const int c = n.saved[0].dim(0);
      const int inner = n.saved[0].numel() / c;
      auto& gx = gin(0);
      auto& gb = gin(1);
      for (int ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        for (int i = 0; i < inner; ++i) {
          const double g = gy[static_cast<size_t>(ci) * inner + i];
          gx[static_cast<size_t>(ci) * inner + i] += g;
          acc += g;
        }
        gb[static_cast<size_t>(ci)] += acc;
      }
      break;
    }
    case Op::kChannelAffine: {
      const Tensor& x = n.saved[0];
      const Tensor& scale = n.saved[1];
      const int c = x.dim(0);
      const int inner = x.numel() / c;
      auto& gx = gin(0);
      auto& gs = gin(1);
      auto& gt = gin(2);
      const double* px = x.data();
      const double* ps = scale.data();
      for (int ci = 0; ci < c; ++ci) {
        double sacc = 0.0, tacc = 0.0;
        for (int i = 0; i < inner; ++i) {
          const size_t idx = static_cast<size_t>(ci) * inner + i;
          gx[idx] += gy[idx] * ps[ci];
          sacc += gy[idx] * px[idx];
          tacc += gy[idx];
        }
        gs[static_cast<size_t>(ci)] += sacc;
        gt[static_cast<size_t>(ci)] += tacc;
      }
      break;
    }
    case Op::kReshape: {
      auto& gx = gin(0);
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      break;
    }
    case Op::kHwcToChw: {
      const Tensor& x = n.saved[0];
      const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
      auto& gx = gin(0);
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          for (int ci = 0; ci < c; ++ci)
            gx[(static_cast<size_t>(y) * w + xx) * c + ci] +=
                gy[(static_cast<size_t>(ci) * h + y) * w + xx];
      break;
    }
    case Op::kSelect0: {
      const int inner = n.out.numel();
      auto& gx = gin(0);
      double* dst = gx.data() + static_cast<size_t>(n.iattr) * inner;
      for (int i = 0; i < inner; ++i) dst[i] += gy[static_cast<size_t>(i)];
      break;
    }
  }
}

// ---- gradient checker -------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& fn,
                  const Tensor& point, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be positive");
  Tensor x = point.clone().set_requires_grad(true);
  Graph graph;
  std::vector<double> analytic;
  {
    Recording rec(graph);
    Tensor loss = fn(x);
    if (loss.numel() != 1)
      throw std::invalid_argument("grad_check: fn must return a scalar");
    if (!std::isfinite(loss.item()))
      throw std::domain_error("grad_check: non-finite function value");
    graph.backward(loss, /*write_leaf_grads=*/false);
    const std::vector<double>* g = graph.grad_of(x);
    analytic = g != nullptr ? *g : std::vector<double>(
                                       static_cast<size_t>(x.numel()), 0.0);
  }
  // Plain value evaluations: suppress any recording scope so captured
  // parameters do not get recorded while probing.
  Graph* saved = g_active_graph;
  g_active_graph = nullptr;
  Tensor probe = point.clone();
  double max_err = 0.0;
  try {
    for (int i = 0; i < probe.numel(); ++i) {
      const double orig = probe.at(i);
      probe.at(i) = orig + h;
      const double fp = fn(probe).item();
      probe.at(i) = orig - h;
      const double fm = fn(probe).item();
      probe.at(i) = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::domain_error("grad_check: non-finite function value");
      const double cd = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[static_cast<size_t>(i)] - cd) /
                         std::max(1.0, std::abs(cd));
      max_err = std::max(max_err, err);
    }
  } catch (...) {
    g_active_graph = saved;
    throw;
  }
  g_active_graph = saved;
  return max_err;
}

}  // namespace maskform
