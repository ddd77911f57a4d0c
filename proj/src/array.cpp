#include "deskdet/array.hpp"

#include <algorithm>
#include <sstream>

namespace deskdet {

int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Array::Array(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != static_cast<int>(data.size())) {
    throw std::invalid_argument("Array: shape " + shape_str(shape) + " does not match " +
                                std::to_string(data.size()) + " elements");
  }
  for (int dim : shape) {
    if (dim <= 0) throw std::invalid_argument("Array: non-positive dim in " + shape_str(shape));
  }
}

Array::Array(Shape s) : shape(std::move(s)) {
  for (int dim : shape) {
    if (dim <= 0) throw std::invalid_argument("Array: non-positive dim in " + shape_str(shape));
  }
  data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
}

Array Array::full(const Shape& s, double v) {
  Array a(s);
  std::fill(a.data.begin(), a.data.end(), v);
  return a;
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Parameter& ParamStore::add(const std::string& name, Array init, bool trainable) {
  if (index_.count(name)) {
    throw std::invalid_argument("ParamStore: duplicate parameter name '" + name + "'");
  }
  params_.push_back(std::make_unique<Parameter>(name, std::move(init), trainable));
  index_[name] = static_cast<int>(params_.size()) - 1;
  return *params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[static_cast<std::size_t>(it->second)].get();
}

const Parameter* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[static_cast<std::size_t>(it->second)].get();
}

Parameter& ParamStore::get(const std::string& name) {
  Parameter* p = find(name);
  if (!p) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return *p;
}

const Parameter& ParamStore::get(const std::string& name) const {
  const Parameter* p = find(name);
  if (!p) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return *p;
}

std::vector<Parameter*> ParamStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParamStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParamStore::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p->trainable) out.push_back(p.get());
  }
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

}  // namespace deskdet
