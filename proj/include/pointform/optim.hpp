#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "pointform/common.hpp"
#include "pointform/tensor.hpp"

namespace pf {

template <class S>
struct NamedParam {
  std::string name;
  Var<S> var;
};

// insertion-ordered parameter registry; the order fixes checkpoint layout
template <class S>
struct ParamStore {
  std::vector<NamedParam<S>> items;

  Var<S> add(const std::string& name, Var<S> p) {
    for (const auto& it : items)
      check(it.name != name, cat("ParamStore: duplicate name ", name));
    items.push_back({name, p});
    return p;
  }

  const Var<S>& get(const std::string& name) const {
    for (const auto& it : items)
      if (it.name == name) return it.var;
    throw ValueError(cat("ParamStore: no parameter named ", name));
  }

  bool has(const std::string& name) const {
    for (const auto& it : items)
      if (it.name == name) return true;
    return false;
  }
};

enum class LrSchedule { Constant, Cosine };

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  LrSchedule schedule = LrSchedule::Cosine;
  std::size_t total_steps = 1;  // cosine horizon
};

// name of a group plus the parameters assigned to it by name
struct GroupDef {
  std::string name;
  double lr = 0.0;
  std::vector<std::string> members;
};

// Decoupled weight decay: p -= lr * (mhat / (sqrt(vhat) + eps) + wd * p).
// A group with lr 0 is frozen bit-for-bit, decay included.
template <class S>
class AdamW {
 public:
  AdamW(const ParamStore<S>& store, std::vector<GroupDef> groups, AdamConfig cfg)
      : cfg_(cfg) {
    check(cfg.total_steps > 0, "AdamW: total_steps must be positive");
    std::unordered_map<std::string, std::size_t> owner;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (const auto& name : groups[g].members) {
        check(store.has(name), cat("AdamW: group ", groups[g].name,
                                   " names unknown parameter ", name));
        check(!owner.count(name),
              cat("AdamW: parameter ", name, " assigned to two groups"));
        owner[name] = g;
      }
    }
    for (const auto& it : store.items)
      check(owner.count(it.name),
            cat("AdamW: parameter ", it.name, " missing from every group"));
    for (std::size_t g = 0; g < groups.size(); ++g) {
      Slot slot;
      slot.name = groups[g].name;
      slot.lr = groups[g].lr;
      for (const auto& it : store.items)
        if (owner[it.name] == g) {
          slot.names.push_back(it.name);
          slot.params.push_back(it.var);
          slot.m.emplace_back(it.var->size(), S(0));
          slot.v.emplace_back(it.var->size(), S(0));
        }
      slots_.push_back(std::move(slot));
    }
  }

  double schedule_factor() const {
    if (cfg_.schedule == LrSchedule::Constant) return 1.0;
    double frac = double(std::min(t_, cfg_.total_steps)) / double(cfg_.total_steps);
    return 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  }

  double group_lr(const std::string& name) const {
    for (const auto& s : slots_)
      if (s.name == name) return s.lr * schedule_factor();
    throw ValueError(cat("AdamW: no group named ", name));
  }

  // effective lr of the largest-lr group, for logging
  double current_lr() const {
    double hi = 0;
    for (const auto& s : slots_) hi = std::max(hi, s.lr);
    return hi * schedule_factor();
  }

  std::size_t step_count() const { return t_; }
  void set_step_count(std::size_t t) { t_ = t; }

  // moment vectors by parameter name, for checkpointing
  struct StateRef {
    std::string name;
    std::vector<S>* m;
    std::vector<S>* v;
  };
  std::vector<StateRef> state_refs() {
    std::vector<StateRef> out;
    for (auto& slot : slots_)
      for (std::size_t i = 0; i < slot.params.size(); ++i)
        out.push_back({slot.names[i], &slot.m[i], &slot.v[i]});
    return out;
  }

  void step() {
    double sched = schedule_factor();
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (auto& slot : slots_) {
      double lr = slot.lr * sched;
      for (std::size_t i = 0; i < slot.params.size(); ++i) {
        Tensor<S>& p = *slot.params[i];
        p.ensure_grad();
        for (std::size_t j = 0; j < p.size(); ++j) {
          double g = double(p.grad[j]);
          double m = double(slot.m[i][j]) * cfg_.beta1 + (1 - cfg_.beta1) * g;
          double v = double(slot.v[i][j]) * cfg_.beta2 + (1 - cfg_.beta2) * g * g;
          slot.m[i][j] = S(m);
          slot.v[i][j] = S(v);
          double upd = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps) +
                       cfg_.weight_decay * double(p.value[j]);
          p.value[j] = S(double(p.value[j]) - lr * upd);
        }
      }
    }
  }

 private:
  struct Slot {
    std::string name;
    double lr = 0;
    std::vector<std::string> names;
    std::vector<Var<S>> params;
    std::vector<std::vector<S>> m, v;
  };
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

// every parameter in one group at a single learning rate
template <class S>
std::vector<GroupDef> all_trainable(const ParamStore<S>& store, double lr) {
  GroupDef g{"train", lr, {}};
  for (const auto& it : store.items) g.members.push_back(it.name);
  return {g};
}

}  // namespace pf
