#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace maskform {

using Shape = std::vector<int>;

int shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense f64 tensor. Copies share storage; recorded ops never mutate a tensor
// that participates in a graph, they allocate fresh outputs instead. The grad
// buffer lives in the shared storage block so every copy of a leaf sees the
// gradient written by backward().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  int ndim() const { return static_cast<int>(storage_->shape.size()); }
  int dim(int i) const { return storage_->shape[static_cast<size_t>(i)]; }
  int numel() const { return static_cast<int>(storage_->data.size()); }

  double* data() { return storage_->data.data(); }
  const double* data() const { return storage_->data.data(); }
  std::vector<double>& vec() { return storage_->data; }
  const std::vector<double>& vec() const { return storage_->data; }

  // Value of a one-element tensor.
  double item() const;

  double at(int i) const { return storage_->data[static_cast<size_t>(i)]; }
  double& at(int i) { return storage_->data[static_cast<size_t>(i)]; }
  double at(int i, int j) const;
  double& at(int i, int j);
  double at(int i, int j, int k) const;
  double& at(int i, int j, int k);

  bool requires_grad() const {
    return storage_ != nullptr && storage_->requires_grad;
  }
  Tensor& set_requires_grad(bool value);

  bool has_grad() const { return storage_->grad != nullptr; }
  const std::vector<double>& grad() const { return *storage_->grad; }
  // Creates a zero-filled grad buffer if absent.
  std::vector<double>& mutable_grad();
  void clear_grad() { storage_->grad.reset(); }
  void accumulate_grad(const std::vector<double>& g);

  // Identity of the underlying buffer; used to key graph nodes.
  const void* storage_id() const { return storage_.get(); }

  // Deep copy with fresh storage and no grad.
  Tensor clone() const;

  bool all_finite() const;

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::unique_ptr<std::vector<double>> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> storage_;
};

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatmul,
  kConv3x3,
  kConv1x1,
  kRelu,
  kSigmoid,
  kSoftmax,
  kLogSoftmax,
  kLog,
  kClamp,
  kMeanAll,
  kSumAll,
  kUpsample2x,
  kLayerNorm,
  kScale,
  kAddConst,
  kPowConst,
  kConcat,
  kTranspose,
  kBiasAdd,
  kChannelAffine,
  kReshape,
  kHwcToChw,
  kSelect0,
};

struct Node {
  Op op = Op::kLeaf;
  std::vector<int> inputs;      // graph ids of the inputs, in op order
  std::vector<Tensor> saved;    // input values needed by backward
  Tensor out;
  int iattr = 0;                // axis, stride or index, op-dependent
  double c0 = 0.0, c1 = 0.0;    // scalar attributes (constants, clamp bounds)
};

// Reverse-mode tape. Nodes are recorded in execution order; backward walks
// them once in reverse. A graph is confined to one thread of execution.
class Graph {
 public:
  int size() const { return static_cast<int>(nodes_.size()); }
  void clear();

  // Node id of a tensor in this graph, -1 if untracked.
  int lookup(const Tensor& t) const;
  // Registers t as a leaf if untracked; returns its node id.
  int ensure_tracked(const Tensor& t);
  int record(Node node);

  // Computes d(loss)/d(node) for every node. loss must be a scalar tracked by
  // this graph. When write_leaf_grads is set, each requires_grad leaf tensor
  // gets the gradient accumulated into its grad buffer.
  void backward(const Tensor& loss, bool write_leaf_grads = true);

  // Gradient buffer for a tracked tensor after backward; null if untracked.
  const std::vector<double>* grad_of(const Tensor& t) const;

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> by_storage_;
  std::vector<std::vector<double>> grads_;

  std::vector<double>& grad_buffer(int id);
  void backprop_node(int id);
};

// RAII scope that makes g the active graph on the current thread. Ops record
// into the active graph whenever any input requires grad.
class Recording {
 public:
  explicit Recording(Graph& g);
  ~Recording();
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

 private:
  Graph* prev_;
};

Graph* active_graph();

// ---- primitive ops (forward + recorded backward) --------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor divide(const Tensor& a, const Tensor& b);     // elementwise
Tensor matmul(const Tensor& a, const Tensor& b);     // (M,K) x (K,N)
// x: (Cin,H,W), w: (Cout,Cin,3,3), pad 1, stride 1 or 2.
Tensor conv2d_3x3(const Tensor& x, const Tensor& w, int stride = 1);
// x: (Cin,H,W), w: (Cout,Cin)
Tensor conv2d_1x1(const Tensor& x, const Tensor& w);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
Tensor log(const Tensor& x);                         // domain x > 0
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor mean_all(const Tensor& x);                    // scalar
Tensor sum_all(const Tensor& x);                     // scalar
Tensor upsample_nearest_2x(const Tensor& x);         // (C,H,W) -> (C,2H,2W)
Tensor layer_norm(const Tensor& x, int axis);        // eps 1e-5 on variance
Tensor scale_by_constant(const Tensor& x, double c);
Tensor add_constant(const Tensor& x, double c);
Tensor pow_constant(const Tensor& x, double p);      // domain x >= 0
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor transpose(const Tensor& x);                   // 2-D
Tensor broadcast_add_bias(const Tensor& x, const Tensor& bias);  // bias over axis 0
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);
Tensor reshape(const Tensor& x, Shape shape);
Tensor hwc_to_chw(const Tensor& x);                  // (H,W,C) -> (C,H,W)
Tensor select0(const Tensor& x, int index);          // x[index] along axis 0

void backward(const Tensor& loss, Graph& graph);

// Max over coordinates of |analytic - central difference| / max(1, |cd|).
// fn must map a tensor to a scalar tensor and be evaluable both under a
// recording scope (for the analytic gradient) and without one.
double grad_check(const std::function<Tensor(const Tensor&)>& fn,
                  const Tensor& point, double h);

}  // namespace maskform
