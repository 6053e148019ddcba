#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "fine/glyphs.hpp"
#include "fine/image.hpp"
#include "fine/rng.hpp"
#include "fine/transform.hpp"

namespace fine {

// One four-choice problem: hint pair (x, y = rule(x)), probe x_prime and the
// candidates. The four candidates are rule(x'), distractor(x'), rule(z) and
// distractor(z) for a wrong object z, shuffled.
struct IQTask {
  Image x;
  Image y;
  Image x_prime;
  std::array<Image, 4> choices;
  std::uint8_t answer_index = 0;
  TransformSpec rule;
  // Not serialized; absent on tasks read back from disk.
  std::optional<TransformSpec> distractor_rule;
  std::uint16_t hint_class = 0;
  std::uint16_t probe_class = 0;

  std::size_t side() const { return x.side; }
};

class TaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InsufficientClassesError : public TaskError {
 public:
  using TaskError::TaskError;
};

class DegenerateDistractorError : public TaskError {
 public:
  using TaskError::TaskError;
};

struct AssembleOptions {
  // Families the distractor rule is drawn from; empty means the rule's family.
  std::vector<Family> distractor_families;
  SampleOptions sample;
  // Probe from the hint's class (different instance) instead of another class.
  bool same_class_probe = false;
  int max_attempts = 64;
};

IQTask assemble_task(const ImageCollection& source, const TransformSpec& rule,
                     const AssembleOptions& opts, Rng& rng);

// Checks every invariant that is recoverable from a stored task: images valid
// and equal-sized, y == rule(x), choices[answer] == rule(x'), choices pairwise
// distinct, and (when known) the distractor realizes the other three slots.
void validate_task(const IQTask& task);

}  // namespace fine
