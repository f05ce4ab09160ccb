#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// Parameter class drives width-transfer rules and per-class learning rates.
enum class ParamClass { Embedding, Hidden, Unembedding };

inline const char* to_string(ParamClass c) {
    switch (c) {
        case ParamClass::Embedding: return "embedding";
        case ParamClass::Hidden: return "hidden";
        case ParamClass::Unembedding: return "unembedding";
    }
    return "?";
}

template <typename S>
struct Parameter {
    std::string name;
    ParamClass cls = ParamClass::Hidden;
    Tensor<S> value;
    Tensor<S> grad;
    std::size_t reg_index = 0;  // position in the owning registry

    Parameter() = default;
    Parameter(std::string n, ParamClass c, Tensor<S> v)
        : name(std::move(n)), cls(c), value(std::move(v)), grad(value.shape) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), S(0)); }
};

// Owns parameters in creation order; the order defines checkpoint layout and
// every fixed-order walk over the model's weights.
template <typename S>
class ParamRegistry {
  public:
    Parameter<S>* add(std::string name, ParamClass cls, Tensor<S> value) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        items_.push_back(std::make_unique<Parameter<S>>(std::move(name), cls, std::move(value)));
        index_[items_.back()->name] = items_.size() - 1;
        items_.back()->reg_index = items_.size() - 1;
        return items_.back().get();
    }

    Parameter<S>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : items_[it->second].get();
    }

    const Parameter<S>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : items_[it->second].get();
    }

    std::size_t size() const { return items_.size(); }
    Parameter<S>& operator[](std::size_t i) { return *items_[i]; }
    const Parameter<S>& operator[](std::size_t i) const { return *items_[i]; }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    void zero_grads() {
        for (auto& p : items_) p->zero_grad();
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& p : items_) n += p->value.numel();
        return n;
    }

  private:
    std::vector<std::unique_ptr<Parameter<S>>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace moelab
