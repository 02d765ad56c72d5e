#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "qfeedback/common.hpp"

namespace qfb {

inline std::string json_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size() + 2);
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

// Minimal JSON emitter with insertion-ordered keys and fixed float
// formatting, so identical inputs serialize to identical bytes.
class JsonWriter {
 public:
  std::string str() const { return out_; }

  JsonWriter& begin_object() { separator(); out_ += '{'; fresh_ = true; return *this; }
  JsonWriter& end_object() { out_ += '}'; fresh_ = false; return *this; }
  JsonWriter& begin_array() { separator(); out_ += '['; fresh_ = true; return *this; }
  JsonWriter& end_array() { out_ += ']'; fresh_ = false; return *this; }

  JsonWriter& key(const std::string& name) {
    separator();
    out_ += '"' + json_escape(name) + "\":";
    fresh_ = true;
    return *this;
  }

  JsonWriter& value(double v) { separator(); out_ += format_double(v); fresh_ = false; return *this; }
  JsonWriter& value(int v) { separator(); out_ += std::to_string(v); fresh_ = false; return *this; }
  JsonWriter& value(long v) { separator(); out_ += std::to_string(v); fresh_ = false; return *this; }
  JsonWriter& value(std::uint64_t v) { separator(); out_ += std::to_string(v); fresh_ = false; return *this; }
  JsonWriter& value(bool v) { separator(); out_ += v ? "true" : "false"; fresh_ = false; return *this; }
  JsonWriter& value(const std::string& v) {
    separator();
    out_ += '"' + json_escape(v) + '"';
    fresh_ = false;
    return *this;
  }
  JsonWriter& value(const char* v) { return value(std::string(v)); }

  JsonWriter& value(const VectorXd& v) {
    begin_array();
    for (int i = 0; i < v.size(); ++i) value(v[i]);
    return end_array();
  }

  JsonWriter& value(const MatrixXd& m) {
    begin_array();
    for (int i = 0; i < m.rows(); ++i) {
      begin_array();
      for (int j = 0; j < m.cols(); ++j) value(m(i, j));
      end_array();
    }
    return end_array();
  }

  template <typename T>
  JsonWriter& field(const std::string& name, const T& v) {
    key(name);
    return value(v);
  }

 private:
  void separator() {
    if (!fresh_ && !out_.empty()) {
      char last = out_.back();
      if (last != '{' && last != '[' && last != ':') out_ += ',';
    }
    fresh_ = false;
  }

  std::string out_;
  bool fresh_ = true;
};

}  // namespace qfb
