#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace deskdet {

using Shape = std::vector<int>;

int shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major float64 buffer. All continuous quantities in the project
/// (images, features, logits, offsets, embeddings, parameters) live here.
struct Array {
  Shape shape;
  std::vector<double> data;

  Array() = default;
  Array(Shape s, std::vector<double> d);
  explicit Array(Shape s);  // zero-filled

  static Array zeros(const Shape& s) { return Array(s); }
  static Array full(const Shape& s, double v);
  static Array scalar(double v) { return Array({1}, {v}); }

  int numel() const { return static_cast<int>(data.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  double& operator[](int i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](int i) const { return data[static_cast<std::size_t>(i)]; }

  /// 2-D accessor; no bounds check beyond debug builds.
  double& at2(int r, int c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
  double at2(int r, int c) const { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
};

bool same_shape(const Shape& a, const Shape& b);

/// Trainable or buffer state with a stable dotted name ("roi.cls.w").
/// Gradients accumulate; zero_grad is explicit.
struct Parameter {
  std::string name;
  Array value;
  Array grad;
  bool trainable = true;

  Parameter(std::string n, Array v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(Array::zeros(value.shape)),
        trainable(train) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

/// Insertion-ordered parameter set with unique names. Iteration order is the
/// registration order, which keeps optimizer/EMA/checkpoint traversals
/// deterministic.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Array init, bool trainable = true);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> trainable();

  void zero_grad();
  std::size_t size() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, int> index_;
};

}  // namespace deskdet
