#pragma once

// JSON form of ModelSpec: {"q": .., "pi": [..], "Q_scaled": [row-major, q*q], "n": ..}.
// Nested q x q arrays are accepted on input; output is always flat row-major.

#include <json.hpp>

#include <string>

#include "sbmbp/error.hpp"
#include "sbmbp/model.hpp"

namespace sbmbp {

inline nlohmann::ordered_json to_json(const ModelSpec& spec) {
  nlohmann::ordered_json j;
  j["q"] = spec.q;
  std::vector<double> pi(spec.pi.data(), spec.pi.data() + spec.pi.size());
  j["pi"] = pi;
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(spec.q * spec.q));
  for (int r = 0; r < spec.q; ++r)
    for (int c = 0; c < spec.q; ++c) flat.push_back(spec.Q_scaled(r, c));
  j["Q_scaled"] = flat;
  j["n"] = spec.n;
  return j;
}

inline Matrix matrix_from_json(const nlohmann::json& j, int q, const std::string& what) {
  Matrix m(q, q);
  if (!j.is_array()) throw Error(ErrorCode::ConfigInvalid, what + " must be an array");
  if (j.size() == static_cast<std::size_t>(q) && j[0].is_array()) {
    for (int r = 0; r < q; ++r) {
      if (j[r].size() != static_cast<std::size_t>(q))
        throw Error(ErrorCode::ConfigInvalid, what + " row has wrong length");
      for (int c = 0; c < q; ++c) m(r, c) = j[r][c].get<double>();
    }
  } else if (j.size() == static_cast<std::size_t>(q * q)) {
    for (int r = 0; r < q; ++r)
      for (int c = 0; c < q; ++c) m(r, c) = j[r * q + c].get<double>();
  } else {
    throw Error(ErrorCode::ConfigInvalid, what + " must have q*q entries");
  }
  return m;
}

inline Vector vector_from_json(const nlohmann::json& j, int q, const std::string& what) {
  if (!j.is_array() || j.size() != static_cast<std::size_t>(q))
    throw Error(ErrorCode::ConfigInvalid, what + " must be an array of length q");
  Vector v(q);
  for (int i = 0; i < q; ++i) v(i) = j[i].get<double>();
  return v;
}

inline ModelSpec model_from_json(const nlohmann::json& j) {
  try {
    ModelSpec spec;
    spec.q = j.at("q").get<int>();
    if (spec.q < 2) throw Error(ErrorCode::ConfigInvalid, "q must be >= 2");
    spec.pi = vector_from_json(j.at("pi"), spec.q, "pi");
    spec.Q_scaled = matrix_from_json(j.at("Q_scaled"), spec.q, "Q_scaled");
    spec.n = j.value("n", std::uint64_t{1000000});
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigInvalid) throw;
    throw Error(ErrorCode::ConfigInvalid, e.what());
  }
}

}  // namespace sbmbp
