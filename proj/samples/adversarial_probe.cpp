// Fine-tunes a tiny random encoder on synthetic memc reports, moves it to
// csrf, then grows a StructShot support set one sentence at a time. One pool
// sentence is a copy of a test sentence with every O token relabelled SN.
// Nearest-neighbour tagging flags the step where it enters; the CRF mostly
// absorbs it because the transition prior still favours O runs.

#include <iostream>

#include "fewvuln/harness.hpp"
#include "fewvuln/synthetic.hpp"

using namespace fewvuln;

int main() {
  const auto data = synthetic::make_dataset();
  const auto& train = data.at(Category::memc, Split::train);
  const auto& valid = data.at(Category::memc, Split::valid);

  TrainingConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.epochs = 3;
  auto result = fine_tune(EncoderHandle{"random:hidden=32,layers=2,heads=2,intermediate=64"}, train, valid, cfg);
  std::cout << "fine-tuned on memc, validation weighted F1 " << result.best.weighted_f1 << '\n';

  const auto& csrf = data.at(Category::csrf, Split::test);
  std::vector<TaggedSentence> test(csrf.begin(), csrf.begin() + 8);
  const auto& support = data.at(Category::csrf, Split::train);
  std::vector<TaggedSentence> pool(support.begin(), support.begin() + 6);
  std::vector<TaggedSentence> rest(support.begin() + 6, support.end());
  auto moved = transfer(*result.best.model, rest, data.at(Category::csrf, Split::valid), cfg);
  const auto& model = *moved.best.model;
  std::cout << "transferred to csrf, validation weighted F1 " << moved.best.weighted_f1 << "\n\n";
  pool.insert(pool.begin() + 4, synthetic::adversary_for(test[0]));

  ProbeOptions opts;
  opts.transitions = tag_sequences(train);
  for (double t : {1.0, 0.1}) {
    opts.structshot.emission.temperature = t;
    std::cout << "temperature " << t << '\n' << render_probe_csv(run_adversarial_probe(pool, test, model, opts)) << '\n';
  }
  opts.structshot.use_crf = false;
  std::cout << "nearest neighbour only\n" << render_probe_csv(run_adversarial_probe(pool, test, model, opts));
}
