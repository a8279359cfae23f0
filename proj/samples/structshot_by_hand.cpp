// StructShot on hand-made 2-d embeddings: nearest-neighbour emissions and
// Viterbi over transitions estimated from a tiny tag corpus.

#include <iostream>

#include "fewvuln/structshot.hpp"

using namespace fewvuln;

int main() {
  auto v = [](float x, float y) {
    Embedding e(2);
    e << x, y;
    return e;
  };
  // support: "Foo 1.2 crashes" tagged SN SV O
  TaggedSentence support{{"Foo", "1.2", "crashes"}, {Tag::SN, Tag::SV, Tag::O}, "support-0"};
  const auto set = build_support_set({support}, {{v(1, 0), v(0, 1), v(-1, 0)}});

  const auto transitions = estimate_transitions({{Tag::O, Tag::SN, Tag::SV, Tag::O},
                                                 {Tag::SN, Tag::SN, Tag::SV, Tag::O, Tag::O}});

  // query tokens: near SN, ambiguous, near SV, near O
  const SentenceEmbeddings query{v(0.9f, 0.1f), v(0.6f, 0.6f), v(0.1f, 0.9f), v(-0.8f, -0.2f)};
  const auto emissions = compute_emissions(query, set);
  const auto decoded = viterbi_decode_scored(emissions, transitions);

  std::cout << "token  nearest  emission(SN SV O)           viterbi\n";
  for (std::size_t i = 0; i < query.size(); ++i) {
    const auto [tag, dist] = nn_tag(query[i], set);
    std::cout << i << "      " << to_string(tag) << "       ";
    for (double p : emissions.rows[i]) std::cout << p << ' ';
    std::cout << "  " << to_string(decoded.tags[i]) << '\n';
  }
  std::cout << "log score " << decoded.log_score << '\n';
}
