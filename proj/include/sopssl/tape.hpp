#ifndef SOPSSL_TAPE_HPP
#define SOPSSL_TAPE_HPP

#include <functional>
#include <string>
#include <vector>

#include "sopssl/tensor.hpp"

namespace sopssl {

enum class ParamGroup { feature_extractor, classifier };

inline const char* param_group_name(ParamGroup g) {
  return g == ParamGroup::feature_extractor ? "feature_extractor" : "classifier";
}

// One trainable tensor. `node` is the leaf id in the tape it was last bound
// to; the trainer reads gradients back through it after a sweep.
struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::feature_extractor;
  Tensor value;
  int node = -1;

  Parameter() = default;
  Parameter(std::string name, ParamGroup group, Tensor value)
      : name(std::move(name)), group(group), value(std::move(value)) {
    this->value.requires_grad = true;
  }
};

// Recording tape for reverse-mode differentiation. Every operation computes
// its forward value eagerly and appends a node whose closure scatters the
// upstream gradient to the operation inputs. Creation order is topological
// by construction, so the backward sweep is a single reverse pass that
// visits each node exactly once. A tape is confined to one training step;
// it is neither copyable nor movable.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers t as a leaf. Gradients accumulate for it whether or not
  // requires_grad is set; the flag is carried for bookkeeping.
  Tensor leaf(const Tensor& t);
  Tensor leaf(Parameter& p);

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor add_const(const Tensor& a, double c);
  Tensor hadamard(const Tensor& a, const Tensor& b);
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  Tensor relu(const Tensor& a);
  Tensor log_elem(const Tensor& a);
  Tensor exp_elem(const Tensor& a);
  Tensor sqrt_elem(const Tensor& a);
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor trace(const Tensor& a);
  Tensor frobenius_norm(const Tensor& a);
  Tensor softmax_rows(const Tensor& logits);
  Tensor log_softmax_rows(const Tensor& logits);
  Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int padding);
  Tensor col_means(const Tensor& a);                       // n x d -> 1 x d
  Tensor sub_rowvec(const Tensor& x, const Tensor& r);     // X - 1*r
  Tensor row_sums(const Tensor& a);                        // n x d -> n x 1
  Tensor div_rows(const Tensor& w, const Tensor& r);       // row i divided by r[i]
  Tensor mul_scalar(const Tensor& x, const Tensor& s);     // s is a scalar tensor
  Tensor div_scalar(const Tensor& x, const Tensor& s);
  Tensor pick_rows(const Tensor& p, const std::vector<int>& cols);  // b x 1
  Tensor stack_rows(const std::vector<Tensor>& rows);
  Tensor reshape(const Tensor& a, Shape shape);
  Tensor sym_upper_vec(const Tensor& z);  // upper triangle incl. diagonal
  Tensor grl(const Tensor& a, double backward_factor);

  // Seeds the scalar loss with 1 and runs the reverse sweep.
  void backward(const Tensor& loss);

  bool has_grad(int node) const;
  const Tensor& grad(int node) const;
  const Tensor& grad(const Tensor& t) const { return grad(t.node); }

  size_t num_nodes() const { return nodes_.size(); }

  // NaN/Inf checks after each forward op. Defaults on in debug builds,
  // off in release; gradcheck and the test suites force it on.
  static void set_finite_checks(bool on);
  static bool finite_checks();

 private:
  struct Node {
    std::function<void(const Tensor& g)> backward;  // empty for leaves
  };

  int push(std::function<void(const Tensor&)> bw);
  Tensor finish(Tensor out, std::function<void(const Tensor&)> bw, const char* op);
  void accumulate(int node, const Tensor& g);
  void accumulate_scaled(int node, const Tensor& g, double c);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;  // keyed by node id; empty shape = untouched
};

}  // namespace sopssl

#endif
