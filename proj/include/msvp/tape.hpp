#pragma once

// Reverse-mode differentiation over a dynamic tape. Ops record a backward
// closure for each output while a tape is active; backward() replays the
// closures in exact reverse execution order, accumulating (summing)
// gradients into shared inputs. Leaf gradients persist across backward
// calls (repeated calls accumulate); intermediate gradients are re-zeroed
// per call and released as soon as their node has been replayed, which
// keeps peak memory near the largest layer instead of the whole network.
//
// A tape is confined to one logical training thread. With no active tape,
// ops run forward-only (eval mode).

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "msvp/tensor.hpp"

namespace msvp {

template <typename S>
class GradTape {
 public:
  using ImplPtr = std::shared_ptr<typename Tensor<S>::Impl>;

  static GradTape*& current() {
    thread_local GradTape* active = nullptr;
    return active;
  }

  void record(ImplPtr out, std::function<void()> backward) {
    outputs_.insert(out.get());
    nodes_.push_back({std::move(out), std::move(backward)});
  }

  void backward(const Tensor<S>& loss) {
    MSVP_CHECK(loss.defined() && loss.numel() == 1,
               "backward: loss must be a scalar tensor");
    MSVP_CHECK(outputs_.count(loss.impl().get()) != 0,
               "backward: loss was not produced through operations tracked "
               "on this tape");
    for (auto& n : nodes_) n.out->grad.assign(n.out->data.size(), S(0));
    loss.impl()->grad[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->backward();
      if (!it->out->requires_grad && !it->out->retain_grad)
        std::vector<S>().swap(it->out->grad);
    }
  }

  void clear() {
    nodes_.clear();
    outputs_.clear();
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    ImplPtr out;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  std::unordered_set<const typename Tensor<S>::Impl*> outputs_;
};

// RAII activation of a tape on the current thread.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(GradTape<S>& tape) : prev_(GradTape<S>::current()) {
    GradTape<S>::current() = &tape;
  }
  ~TapeScope() { GradTape<S>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<S>* prev_;
};

}  // namespace msvp
