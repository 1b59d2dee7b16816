#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stag/mat.hpp"

namespace stag::ad {

// Rows are grouped into contiguous segments: segment s covers row indices
// [offsets[s], offsets[s+1]). Callers order rows accordingly up front.
struct SegmentPlan {
  std::vector<int> offsets;
  int num_segments() const { return static_cast<int>(offsets.size()) - 1; }
  int num_rows() const { return offsets.empty() ? 0 : offsets.back(); }
};

class Graph;

// Handle into a Graph's tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class Act { relu, elu, prelu };

// Reverse-mode tape over Mat. Each op records its backward closure; backward()
// walks the tape once in reverse creation order. Graphs are built fresh per
// training step; parameters are bound by pointer so the optimizer can update
// external storage between steps.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  struct ParamRef {
    std::string name;
    Mat* storage;
    int node;
  };

  Var constant(Mat v);
  Var param(Mat* storage, const std::string& name);

  const Mat& val(Var v) const { return nodes_[check(v)].val; }
  // Zero matrix when no gradient reached the node.
  Mat grad_of(Var v) const;
  const std::vector<ParamRef>& params() const { return params_; }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var hadamard(Var a, Var b);
  Var affine(Var x, double mul, double shift);        // mul * x + shift elementwise
  Var scale_by(Var x, Var s);                         // s is 1x1
  Var add_rowvec(Var X, Var r);                       // r is 1xC
  Var col_scale(Var X, Var c);                        // c is Nx1
  Var matmul(Var a, Var b, bool ta = false, bool tb = false);
  Var concat_cols(const std::vector<Var>& xs);
  Var mean_of(const std::vector<Var>& xs);            // elementwise average, same shapes
  Var gather_rows(Var X, std::vector<int> idx);
  Var substitute_rows(Var X, std::vector<int> rows, Var rep);  // rep is 1xC, written into each listed row
  Var segment_sum(Var X, SegmentPlan plan);
  Var segment_softmax(Var logits, SegmentPlan plan);  // logits Nx1, softmax within segments
  Var l2_normalize_rows(Var X);
  Var softmax_rows(Var X);
  Var rows_dot(Var a, Var b);                         // Nx1 of per-row dot products
  Var cosine_rows(Var a, Var b);                      // composition: rows_dot of normalized rows
  Var sum_all(Var x);
  Var mean_all(Var x);
  Var activation(Var x, Act act, Var prelu_slope = {});
  Var leaky_relu(Var x, double slope);
  Var sigmoid(Var x);
  Var log_(Var x);
  Var exp_(Var x);
  Var pow_clamped(Var x, double p);                   // max(x, 0)^p, p >= 1
  Var detach(Var x);
  Var kl_rowmean(const Mat& P, Var Q);                // mean_i KL(P_i || Q_i), P constant

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape. loss must be 1x1.
  void backward(Var loss);

 private:
  struct Node {
    Mat val;
    Mat grad;
    bool needs_grad = false;
    std::function<void()> back;
  };

  int check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw ValidationError("ad: invalid Var");
    return v.id;
  }
  Var push(Mat val, bool needs_grad) {
    nodes_.push_back(Node{std::move(val), Mat(), needs_grad, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  bool req(Var v) const { return nodes_[check(v)].needs_grad; }
  Mat& gref(int id);  // allocates zeros on first touch
  void accumulate(int id, const Mat& g);

  std::vector<Node> nodes_;
  std::vector<ParamRef> params_;

  friend struct OpCtx;
};

}  // namespace stag::ad
