#include <doctest.h>

#include <filesystem>
#include <set>

#include "metx/data.hpp"
#include "metx/metrics.hpp"
#include "support/oracles.hpp"

using namespace metx;

TEST_CASE("corpus generation is deterministic") {
  const Corpus a = generate_corpus(7, 20);
  const Corpus b = generate_corpus(7, 20);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].report_text == b.samples[i].report_text);
    const auto va = a.samples[i].image.values();
    const auto vb = b.samples[i].image.values();
    CHECK(std::equal(va.begin(), va.end(), vb.begin()));
  }
  CHECK(a.vocab.id_to_token == b.vocab.id_to_token);
}

TEST_CASE("every report is reconstructible from its image") {
  const oracle::ImageDecoder decoder;
  const Corpus corpus = generate_corpus(3, 1000);
  for (const auto& sample : corpus.samples) {
    CHECK(decoder.expected_report(sample.image) == sample.report_text);
  }
}

TEST_CASE("all-empty image maps to four clear sentences") {
  const oracle::ImageDecoder decoder;
  const Tensor blank = Tensor::zeros({64, 64, 3});
  CHECK(decoder.expected_report(blank) ==
        "the upper left is clear . the upper right is clear . "
        "the lower left is clear . the lower right is clear .");
}

TEST_CASE("vocab construction") {
  const Corpus corpus = generate_corpus(1, 300);
  const Vocab& vocab = corpus.vocab;
  CHECK(vocab.id_to_token[Vocab::kPad] == "<pad>");
  CHECK(vocab.id_to_token[Vocab::kBos] == "<bos>");
  CHECK(vocab.id_to_token[Vocab::kEos] == "<eos>");
  CHECK(vocab.id_to_token[Vocab::kUnk] == "<unk>");

  // count distinct template words independently
  const GridSpec grid;
  std::set<std::string> words;
  for (int region = 0; region < 4; ++region) {
    for (std::size_t s = 0; s < grid.shapes.size(); ++s) {
      for (std::size_t c = 0; c < grid.colors.size(); ++c) {
        for (const auto& w :
             tokenize(occupied_sentence(grid, region, s, c))) {
          words.insert(w);
        }
      }
    }
    for (const auto& w : tokenize(empty_sentence(region))) words.insert(w);
  }
  CHECK(vocab.size() == 4 + static_cast<std::int32_t>(words.size()));

  // bijection
  for (std::int32_t id = 0; id < vocab.size(); ++id) {
    CHECK(vocab.id_of(vocab.token(id)) == id);
  }
  CHECK(vocab.id_of("definitely-not-a-word") == Vocab::kUnk);

  // same corpus twice -> identical assignment
  const Corpus again = generate_corpus(1, 300);
  CHECK(corpus.vocab.id_to_token == again.vocab.id_to_token);
}

TEST_CASE("encode and decode") {
  const Corpus corpus = generate_corpus(5, 100);
  const Vocab& vocab = corpus.vocab;
  CHECK(encode("", vocab) == std::vector<std::int32_t>{Vocab::kBos, Vocab::kEos});
  for (const auto& sample : corpus.samples) {
    CHECK(decode(encode(sample.report_text, vocab), vocab) == sample.report_text);
  }
  const auto with_unk = encode("there is a dragon", vocab);
  CHECK(with_unk[4] == Vocab::kUnk);

  // metrics see EOS-truncated text: trailing PAD is invisible
  auto ids = encode("there is", vocab);
  auto padded = ids;
  padded.push_back(Vocab::kPad);
  padded.push_back(Vocab::kPad);
  CHECK(decode(ids, vocab) == decode(padded, vocab));
}

TEST_CASE("no default report exceeds t_max") {
  const Corpus corpus = generate_corpus(11, 500);
  for (const auto& sample : corpus.samples) {
    CHECK(static_cast<int>(sample.report_ids.size()) <= 48);
  }
}

TEST_CASE("batchify") {
  const Corpus corpus = generate_corpus(2, 10);
  auto batches = batchify(corpus, 4, 123, 48);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].reports.size() == 4);
  CHECK(batches[1].reports.size() == 4);
  CHECK(batches[2].reports.size() == 2);

  auto again = batchify(corpus, 4, 123, 48);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    CHECK(batches[b].sample_indices == again[b].sample_indices);
  }

  std::multiset<std::int64_t> seen;
  for (const auto& batch : batches) {
    for (std::int64_t idx : batch.sample_indices) seen.insert(idx);
    for (std::size_t r = 0; r < batch.reports.size(); ++r) {
      const auto& ids = batch.reports[r];
      const std::int32_t len = batch.lengths[r];
      CHECK(len <= 48);
      CHECK(ids[0] == Vocab::kBos);
      CHECK(ids[len - 1] == Vocab::kEos);
      for (std::size_t i = len; i < ids.size(); ++i) CHECK(ids[i] == Vocab::kPad);
    }
  }
  std::multiset<std::int64_t> want;
  for (std::int64_t i = 0; i < 10; ++i) want.insert(i);
  CHECK(seen == want);

  CHECK_THROWS_AS(batchify(corpus, 0, 1, 48), std::invalid_argument);
}

TEST_CASE("corpus export/import round trip") {
  const Corpus corpus = generate_corpus(9, 12);
  const auto path = std::filesystem::temp_directory_path() / "metx_corpus_rt.txt";
  export_corpus(corpus, path.string());
  const Corpus back = import_corpus(path.string());
  REQUIRE(back.samples.size() == corpus.samples.size());
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    CHECK(back.samples[i].report_text == corpus.samples[i].report_text);
    const auto va = corpus.samples[i].image.values();
    const auto vb = back.samples[i].image.values();
    CHECK(std::equal(va.begin(), va.end(), vb.begin()));
  }
  CHECK(back.vocab.id_to_token == corpus.vocab.id_to_token);
  std::filesystem::remove(path);
}
