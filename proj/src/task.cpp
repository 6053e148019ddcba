#include "fine/task.hpp"

#include <algorithm>
#include <string>

namespace fine {

namespace {

struct Pick {
  std::size_t slot;
  std::size_t index;
};

Pick pick_image(const ImageCollection& src, std::size_t slot, Rng& rng) {
  return {slot, static_cast<std::size_t>(rng.below(src.images[slot].size()))};
}

std::size_t pick_slot_excluding(const ImageCollection& src, std::vector<std::size_t> excluded, Rng& rng) {
  std::vector<std::size_t> allowed;
  for (std::size_t s = 0; s < src.class_count(); ++s) {
    if (std::find(excluded.begin(), excluded.end(), s) == excluded.end()) allowed.push_back(s);
  }
  if (allowed.empty()) throw InsufficientClassesError("assemble_task: no class left to draw from");
  return allowed[static_cast<std::size_t>(rng.below(allowed.size()))];
}

const Image& at(const ImageCollection& src, Pick p) { return src.images[p.slot][p.index]; }

}  // namespace

IQTask assemble_task(const ImageCollection& src, const TransformSpec& rule,
                     const AssembleOptions& opts, Rng& rng) {
  if (src.class_count() < 2) {
    throw InsufficientClassesError("assemble_task: need at least 2 classes, have " +
                                   std::to_string(src.class_count()));
  }
  for (const auto& imgs : src.images) {
    if (imgs.empty()) throw InsufficientClassesError("assemble_task: a class has no images");
  }

  const Pick hint = pick_image(src, static_cast<std::size_t>(rng.below(src.class_count())), rng);
  Pick probe{};
  if (opts.same_class_probe) {
    if (src.images[hint.slot].size() < 2) {
      throw InsufficientClassesError("assemble_task: same-class probe needs 2 instances per class");
    }
    do {
      probe = pick_image(src, hint.slot, rng);
    } while (probe.index == hint.index);
  } else {
    probe = pick_image(src, pick_slot_excluding(src, {hint.slot}, rng), rng);
  }
  // Wrong object: another class than the probe, and never the hint image.
  std::vector<std::size_t> excluded{probe.slot};
  if (src.class_count() >= 3 && hint.slot != probe.slot) excluded.push_back(hint.slot);
  Pick wrong{};
  do {
    wrong = pick_image(src, pick_slot_excluding(src, excluded, rng), rng);
  } while (wrong.slot == hint.slot && wrong.index == hint.index);

  IQTask task;
  task.x = at(src, hint);
  task.x_prime = at(src, probe);
  task.rule = rule;
  task.hint_class = src.class_ids[hint.slot];
  task.probe_class = src.class_ids[probe.slot];
  task.y = apply_transform(task.x, rule);
  const Image& z = at(src, wrong);
  const Image correct = apply_transform(task.x_prime, rule);
  const Image wrong_object = apply_transform(z, rule);

  const auto& universe = opts.distractor_families.empty() ? std::vector<Family>{rule.family()}
                                                          : opts.distractor_families;
  std::optional<TransformSpec> distractor;
  Image wrong_transform, both_wrong;
  for (int attempt = 0; attempt < opts.max_attempts && !distractor; ++attempt) {
    const Family fam = universe[static_cast<std::size_t>(rng.below(universe.size()))];
    SampleOptions so = opts.sample;
    if (so.mode == SampleMode::constrained && fam != Family::translation && fam != Family::rotation &&
        fam != Family::shear) {
      so.mode = SampleMode::grid;
    }
    TransformSpec cand = sample_spec(fam, so, rng);
    if (cand == rule) continue;
    Image wt = apply_transform(task.x_prime, cand);
    if (wt == correct) continue;
    Image bw = apply_transform(z, cand);
    if (bw == correct || bw == wrong_object || wt == wrong_object || bw == wt) continue;
    if (wrong_object == correct) continue;
    distractor = cand;
    wrong_transform = std::move(wt);
    both_wrong = std::move(bw);
  }
  if (!distractor) {
    throw DegenerateDistractorError("assemble_task: no distractor distinguishable from " + rule.describe() +
                                    " after " + std::to_string(opts.max_attempts) + " attempts");
  }
  task.distractor_rule = distractor;

  std::array<int, 4> order{0, 1, 2, 3};
  rng.shuffle(order);
  const Image* candidates[4] = {&correct, &wrong_transform, &wrong_object, &both_wrong};
  for (std::size_t slot = 0; slot < 4; ++slot) {
    const int cat = order[slot];
    task.choices[slot] = *candidates[cat];
    if (cat == 0) task.answer_index = static_cast<std::uint8_t>(slot);
  }
  return task;
}

void validate_task(const IQTask& t) {
  validate_image(t.x);
  const std::size_t side = t.x.side;
  auto check = [&](const Image& img, const char* what) {
    validate_image(img);
    if (img.side != side) throw TaskError(std::string("task image '") + what + "' has a different side");
  };
  check(t.y, "y");
  check(t.x_prime, "x_prime");
  for (const auto& c : t.choices) check(c, "choice");
  if (t.answer_index > 3) throw TaskError("answer index outside [0,3]");
  if (apply_transform(t.x, t.rule) != t.y) throw TaskError("y is not rule(x)");
  if (apply_transform(t.x_prime, t.rule) != t.choices[t.answer_index]) {
    throw TaskError("the answer choice is not rule(x')");
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) {
      if (t.choices[i] == t.choices[j]) throw TaskError("two choices are identical");
    }
  if (t.distractor_rule) {
    if (*t.distractor_rule == t.rule) throw TaskError("distractor rule equals the rule");
    const Image wt = apply_transform(t.x_prime, *t.distractor_rule);
    bool found = false;
    for (std::size_t i = 0; i < 4; ++i) found = found || (i != t.answer_index && t.choices[i] == wt);
    if (!found) throw TaskError("no choice realizes (correct object, wrong transform)");
  }
}

}  // namespace fine
