#pragma once

// Character-level vocabulary with a delimiter set.

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "tensor.hpp"

namespace molem {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr char kTerminatorChar = '$';

  /// Default table: pad, terminator, whitespace/punctuation, digits,
  /// lowercase letters, the answer-marker capitals and operator symbols.
  static Vocabulary character_level() {
    return Vocabulary(std::string("$\n ,.;:") + "0123456789" + "abcdefghijklmnopqrstuvwxyz" + "ANS" + "+-*=?[]()%",
                      ",.;\n");
  }

  Vocabulary(std::string chars, std::string_view delimiters) : chars_(std::move(chars)) {
    index_.fill(-1);
    for (std::size_t i = 0; i < chars_.size(); ++i) {
      const auto c = static_cast<unsigned char>(chars_[i]);
      require(index_[c] < 0, "duplicate character in vocabulary");
      index_[c] = static_cast<int>(i) + 1;
    }
    for (char d : delimiters) {
      const int id = index_[static_cast<unsigned char>(d)];
      require(id > 0, "delimiter missing from vocabulary");
      delimiter_ids_.push_back(id);
    }
    require(!delimiter_ids_.empty() && delimiter_ids_.size() < size(), "delimiter set must be a nonempty strict subset");
    terminator_ = index_[static_cast<unsigned char>(kTerminatorChar)];
    require(terminator_ > 0, "terminator missing from vocabulary");
  }

  std::size_t size() const { return chars_.size() + 1; }
  int pad_id() const { return kPad; }
  int terminator_id() const { return terminator_; }
  const std::vector<int>& delimiter_ids() const { return delimiter_ids_; }
  const std::string& characters() const { return chars_; }

  bool is_delimiter(int id) const {
    for (int d : delimiter_ids_) {
      if (d == id) return true;
    }
    return false;
  }

  int id_of(char c) const {
    const int id = index_[static_cast<unsigned char>(c)];
    require(id > 0, std::string("character not in vocabulary: '") + c + "'");
    return id;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(id_of(c));
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (id <= 0 || static_cast<std::size_t>(id) >= size()) continue;
      out.push_back(chars_[static_cast<std::size_t>(id) - 1]);
    }
    return out;
  }

  /// Serialized table: one line per id, with escaped characters.
  std::string serialize() const {
    std::string out = "pad=0\nterminator=" + std::to_string(terminator_) + "\ndelimiters=";
    for (std::size_t i = 0; i < delimiter_ids_.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(delimiter_ids_[i]);
    }
    out += '\n';
    for (std::size_t i = 0; i < chars_.size(); ++i) {
      out += std::to_string(i + 1) + '=' + escape(chars_[i]) + '\n';
    }
    return out;
  }

 private:
  static std::string escape(char c) {
    switch (c) {
      case '\n': return "\\n";
      case ' ': return "\\s";
      case '\\': return "\\\\";
      default: return std::string(1, c);
    }
  }

  std::string chars_;
  std::array<int, 256> index_{};
  std::vector<int> delimiter_ids_;
  int terminator_ = 0;
};

}  // namespace molem
