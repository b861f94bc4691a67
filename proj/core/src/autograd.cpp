#include "dpcc/autograd.hpp"

namespace dpcc {

void Tape::backward(int loss_grad_id) {
    if (nodes_.empty())
        throw StateError("Tape::backward called before any forward op was recorded");
    auto& seed = grad(loss_grad_id);
    if (seed.size() != 1)
        throw StateError("Tape::backward: loss gradient slot is not a scalar");
    seed[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(*this);
    nodes_.clear();
}

}  // namespace dpcc
