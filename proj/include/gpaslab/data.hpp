#pragma once

// Byte-level tokenizer (identity mapping, vocab 256) and deterministic
// corpus batching. The corpus is split into a train and a held-out eval
// region; windows never cross the split boundary, and batching is a pure
// function of (corpus bytes, seed, step).

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gpaslab::data {

inline std::vector<std::int32_t> tokenize(const std::string& text) {
  std::vector<std::int32_t> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i)
    ids[i] = std::int32_t(std::uint8_t(text[i]));
  return ids;
}

inline std::string detokenize(const std::vector<std::int32_t>& ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i)
    out[i] = char(std::uint8_t(ids[i]));
  return out;
}

struct Batch {
  std::vector<std::int32_t> inputs;   // batch*seq, row-major
  std::vector<std::int32_t> targets;  // shifted by one
};

class Corpus {
 public:
  Corpus(std::vector<std::uint8_t> bytes, std::size_t seq_len,
         std::uint64_t seed, double split_fraction = 0.05)
      : bytes_(std::move(bytes)), seq_len_(seq_len), seed_(seed) {
    if (split_fraction <= 0 || split_fraction >= 1)
      throw std::invalid_argument("split_fraction must be in (0,1)");
    const std::size_t n = bytes_.size();
    split_ = std::size_t(double(n) * (1.0 - split_fraction));
    // Non-overlapping windows of seq_len+1 bytes per region.
    train_windows_ = windows_in(0, split_);
    eval_windows_ = windows_in(split_, n - split_);
    if (train_windows_ == 0 || eval_windows_ == 0)
      throw std::runtime_error("corpus too short for seq_len " +
                               std::to_string(seq_len));
    perm_.resize(train_windows_);
    std::iota(perm_.begin(), perm_.end(), std::size_t(0));
    std::mt19937_64 rng(seed);
    std::shuffle(perm_.begin(), perm_.end(), rng);
  }

  static Corpus from_file(const std::string& path, std::size_t seq_len,
                          std::uint64_t seed, double split_fraction = 0.05) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus: " + path);
    std::vector<std::uint8_t> bytes(
        (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Corpus(std::move(bytes), seq_len, seed, split_fraction);
  }

  std::size_t size() const { return bytes_.size(); }
  std::size_t seq_len() const { return seq_len_; }
  std::size_t train_window_count() const { return train_windows_; }
  std::size_t eval_window_count() const { return eval_windows_; }
  std::size_t split_offset() const { return split_; }

  // Training batch for a step: the next batch_size entries of the seeded
  // window permutation, cycling when exhausted.
  Batch next_batch(std::size_t step, std::size_t batch_size) const {
    Batch b;
    b.inputs.reserve(batch_size * seq_len_);
    b.targets.reserve(batch_size * seq_len_);
    for (std::size_t j = 0; j < batch_size; ++j) {
      const std::size_t w =
          perm_[(step * batch_size + j) % train_windows_];
      append_window(b, w * (seq_len_ + 1));
    }
    return b;
  }

  // Sequential eval batch i (no permutation; stable across calls).
  Batch eval_batch(std::size_t index, std::size_t batch_size) const {
    Batch b;
    for (std::size_t j = 0; j < batch_size; ++j) {
      const std::size_t w = (index * batch_size + j) % eval_windows_;
      append_window(b, split_ + w * (seq_len_ + 1));
    }
    return b;
  }

  // All window start offsets, for disjointness checks.
  std::vector<std::size_t> train_offsets() const {
    return offsets(0, train_windows_);
  }
  std::vector<std::size_t> eval_offsets() const {
    return offsets(split_, eval_windows_);
  }

 private:
  std::size_t windows_in(std::size_t, std::size_t len) const {
    return len > seq_len_ ? len / (seq_len_ + 1) : 0;
  }
  std::vector<std::size_t> offsets(std::size_t base, std::size_t count) const {
    std::vector<std::size_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = base + i * (seq_len_ + 1);
    return out;
  }
  void append_window(Batch& b, std::size_t start) const {
    for (std::size_t t = 0; t < seq_len_; ++t) {
      b.inputs.push_back(std::int32_t(bytes_[start + t]));
      b.targets.push_back(std::int32_t(bytes_[start + t + 1]));
    }
  }

  std::vector<std::uint8_t> bytes_;
  std::size_t seq_len_;
  std::uint64_t seed_;
  std::size_t split_ = 0;
  std::size_t train_windows_ = 0;
  std::size_t eval_windows_ = 0;
  std::vector<std::size_t> perm_;
};

}  // namespace gpaslab::data
