#include <doctest.h>

#include "dpcc/autograd.hpp"

using namespace dpcc;

TEST_CASE("tape replays recorded nodes in reverse") {
    Tape t;
    const int a = t.alloc(1);
    const int b = t.alloc(1);
    const int loss = t.alloc(1);
    std::vector<int> order;
    t.record([&, a, b](Tape& tp) {
        order.push_back(1);
        tp.grad(a)[0] += 2.0f * tp.grad(b)[0];
    });
    t.record([&, b, loss](Tape& tp) {
        order.push_back(0);
        tp.grad(b)[0] += 3.0f * tp.grad(loss)[0];
    });
    t.backward(loss);
    CHECK(order == std::vector<int>{0, 1});
    CHECK(t.grad(loss)[0] == 1.0f);
    CHECK(t.grad(b)[0] == 3.0f);
    CHECK(t.grad(a)[0] == 6.0f);
}

TEST_CASE("tape backward error cases") {
    Tape t;
    const int s = t.alloc(1);
    CHECK_THROWS_AS(t.backward(s), StateError);  // nothing recorded
    Tape t2;
    const int v = t2.alloc(3);
    t2.record([](Tape&) {});
    CHECK_THROWS_AS(t2.backward(v), StateError);  // non-scalar seed
}

TEST_CASE("constant tensors carry no gradient id") {
    const Traced c = constant(SparseTensor3());
    CHECK(c.grad_id == -1);
}
