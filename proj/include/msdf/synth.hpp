#pragma once

// Seeded synthetic corpora with known answers, for end-to-end checks of the
// copy head, the selector, and optimization.

#include <cstdint>
#include <string>
#include <vector>

#include "msdf/dialog.hpp"

namespace msdf::synth {

// Knowledge task: one triple (film, relation, object) and a question about the
// relation; the response names the object. Entities are random lowercase
// words. Test entities come from a pool disjoint from train and dev, so they
// appear nowhere in training text.
struct CopyTask {
  std::vector<DialogSample> train, dev, test;
  std::vector<std::string> test_answers;  // entity each test response must contain
};

CopyTask make_copy_task(std::size_t n_train, std::size_t n_dev, std::size_t n_test,
                        std::uint64_t seed);

// Chat task keyed by a topic word in the last history turn; every topic has
// its own response templates.
struct KeyedTask {
  std::vector<DialogSample> train;            // correct responses
  std::vector<DialogSample> generator_train;  // same contexts, responses of a random topic with probability `noise`
  std::vector<DialogSample> dev;
  std::vector<DialogSample> test;
};

KeyedTask make_keyed_task(std::size_t n_train, std::size_t n_dev, std::size_t n_test, double noise,
                          std::uint64_t seed);

// Every text field of the samples, for building a vocabulary.
std::vector<std::string> corpus_texts(const std::vector<DialogSample>& samples);

}  // namespace msdf::synth
