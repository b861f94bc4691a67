#pragma once

#include <functional>
#include <vector>

#include "dpcc/common.hpp"
#include "dpcc/sparse_tensor.hpp"

namespace dpcc {

// Reverse-mode tape. Operations append a backward closure as they run; calling
// backward(loss) replays the closures once each in reverse order. All
// differentiable ops take a Tape* and treat nullptr as "inference only".
class Tape {
  public:
    // Allocates a zero-initialized gradient buffer and returns its id.
    int alloc(std::size_t n) {
        grads_.emplace_back(n, 0.0f);
        return static_cast<int>(grads_.size()) - 1;
    }

    std::vector<float>& grad(int id) { return grads_.at(static_cast<std::size_t>(id)); }
    const std::vector<float>& grad(int id) const {
        return grads_.at(static_cast<std::size_t>(id));
    }

    void record(std::function<void(Tape&)> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    // Seeds d(loss)/d(loss) = 1 and replays the recorded ops in reverse.
    // Throws StateError when nothing was recorded or the id is not a scalar.
    void backward(int loss_grad_id);

    std::size_t num_nodes() const { return nodes_.size(); }

  private:
    std::vector<std::vector<float>> grads_;
    std::vector<std::function<void(Tape&)>> nodes_;
};

// A tensor plus its slot on the tape. grad_id == -1 marks a constant (no
// gradient flows into it).
struct Traced {
    SparseTensor3 value;
    int grad_id = -1;
};

inline Traced constant(SparseTensor3 t) { return Traced{std::move(t), -1}; }

// Scalar values (losses) are accumulated in double but their upstream
// gradient lives on the tape like any other buffer (size 1).
struct TracedScalar {
    double value = 0.0;
    int grad_id = -1;
};

}  // namespace dpcc
