#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "cdlab/errors.hpp"
#include "cdlab/world.hpp"

using namespace cdlab;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cdlab_test_world";
  std::filesystem::create_directories(dir);
  return dir / name;
}

bool contains_run(const std::vector<TokenId>& seq, const std::vector<TokenId>& run) {
  return std::search(seq.begin(), seq.end(), run.begin(), run.end()) != seq.end();
}

}  // namespace

TEST(World, DefaultShapeAndFunctionalMap) {
  const auto w = generate_world({40, 12, 4, 7});
  ASSERT_EQ(w.facts.size(), 40u);
  std::map<TokenId, std::set<TokenId>> continents_of;
  std::map<TokenId, std::set<TokenId>> countries_on;
  std::set<TokenId> cities;
  for (const auto& f : w.facts) {
    continents_of[f.country].insert(f.continent);
    countries_on[f.continent].insert(f.country);
    cities.insert(f.city);
  }
  EXPECT_EQ(cities.size(), 40u);
  EXPECT_EQ(continents_of.size(), 12u);
  for (const auto& [country, cs] : continents_of) EXPECT_EQ(cs.size(), 1u);
  ASSERT_EQ(countries_on.size(), 4u);
  for (const auto& [continent, cs] : countries_on) EXPECT_GE(cs.size(), 2u);
}

TEST(World, MinimalWorld) {
  const auto w = generate_world({2, 2, 2, 3});
  ASSERT_EQ(w.facts.size(), 2u);
  EXPECT_NE(w.facts[0].country, w.facts[1].country);
  EXPECT_NE(w.facts[0].continent, w.facts[1].continent);
}

TEST(World, SameSeedSameWorld) {
  const auto a = generate_world({40, 12, 4, 11});
  const auto b = generate_world({40, 12, 4, 11});
  EXPECT_EQ(a.facts, b.facts);
  const auto c = generate_world({40, 12, 4, 12});
  EXPECT_NE(a.facts, c.facts);
}

TEST(World, UnsatisfiableParamsThrow) {
  EXPECT_THROW(generate_world({3, 4, 2, 1}), GenerationError);
  EXPECT_THROW(generate_world({5, 3, 1, 1}), GenerationError);
  EXPECT_THROW(generate_world({4, 2, 3, 1}), GenerationError);
}

TEST(World, CheckerRejectsNonFunctionalMap) {
  auto w = generate_world({6, 3, 2, 1});
  auto& f0 = w.facts[0];
  const auto other_continent = std::find_if(w.facts.begin(), w.facts.end(), [&](const CityFact& f) {
                                 return f.continent != f0.continent;
                               })->continent;
  auto bad = f0;
  bad.city = w.facts[1].city;
  bad.continent = other_continent;
  w.facts[1] = bad;
  EXPECT_THROW(check_world(w), GenerationError);
}

TEST(World, ExemplarCitiesDisjointFromWorldCities) {
  const auto w = generate_world({40, 12, 4, 1});
  const auto pp = build_prompt(w.vocab, w.facts[0].city);
  const auto ex = exemplar_positions(w.vocab, pp.country_prompt);
  ASSERT_EQ(ex.size(), 5u);
  for (auto p : ex) {
    for (const auto& f : w.facts) EXPECT_NE(pp.country_prompt[p], f.city);
  }
}

TEST(Prompts, ContainTheTemplates) {
  const auto w = generate_world({40, 12, 4, 1});
  const auto city = w.facts[7].city;
  const auto pp = build_prompt(w.vocab, city);
  const auto country_tmpl = w.vocab.encode({"is", "a", "city", "in", "the", "country", "of"});
  const auto continent_tmpl = w.vocab.encode({"is", "a", "city", "in", "the", "continent", "of"});
  EXPECT_TRUE(contains_run(pp.country_prompt, country_tmpl));
  EXPECT_TRUE(contains_run(pp.continent_prompt, continent_tmpl));
  EXPECT_FALSE(contains_run(pp.country_prompt, continent_tmpl));
  // Each prompt ends with the template right after the query city.
  std::vector<TokenId> tail(pp.country_prompt.end() - 7, pp.country_prompt.end());
  EXPECT_EQ(tail, country_tmpl);
  EXPECT_EQ(pp.country_prompt[query_position(pp.country_prompt)], city);
  EXPECT_EQ(pp.continent_prompt[query_position(pp.continent_prompt)], city);
  EXPECT_EQ(pp.country_prompt.size() - query_position(pp.country_prompt),
            pp.continent_prompt.size() - query_position(pp.continent_prompt));
}

TEST(Prompts, FiveShotWithAppendixExemplar) {
  const auto w = generate_world({40, 12, 4, 1});
  const auto pp = build_prompt(w.vocab, w.facts[0].city);
  const auto toronto = w.vocab.encode({"Toronto", "is", "a", "city", "in", "the", "country", "of"});
  EXPECT_TRUE(contains_run(pp.country_prompt, toronto));
  EXPECT_EQ(std::count(pp.country_prompt.begin(), pp.country_prompt.end(), w.vocab.id(".")), 5);
}

TEST(Examples, FortyCitiesGiveSixteenHundredPairsPerTarget) {
  const auto w = generate_world({40, 12, 4, 1});
  const auto ex = generate_examples(w.facts);
  EXPECT_EQ(ex.size(), 6400u);
  for (auto t : kAttributes) {
    std::set<std::pair<TokenId, TokenId>> pairs;
    for (const auto& e : ex) {
      if (e.target == t) pairs.insert({e.base_city, e.source_city});
    }
    EXPECT_EQ(pairs.size(), 1600u);
  }
  std::set<std::size_t> settings;
  for (const auto& e : ex) settings.insert(e.setting);
  EXPECT_EQ(settings.size(), 3200u);
}

TEST(Examples, TwoCitiesEnumerate) {
  const auto w = generate_world({2, 2, 2, 1});
  const auto ex = generate_examples(w.facts);
  EXPECT_EQ(ex.size(), 16u);
  EXPECT_EQ(filter_target(ex, Attribute::Country).size(), 8u);
}

TEST(Examples, CounterfactualLabelRule) {
  const auto w = generate_world({40, 12, 4, 2});
  std::map<TokenId, CityFact> facts;
  for (const auto& f : w.facts) facts.emplace(f.city, f);
  for (const auto& e : generate_examples(w.facts)) {
    const auto& who = e.queried == e.target ? facts.at(e.source_city) : facts.at(e.base_city);
    ASSERT_EQ(e.label, who.attribute(e.queried));
    if (e.base_city == e.source_city) {
      EXPECT_EQ(e.label, facts.at(e.base_city).attribute(e.queried));
    }
  }
}

TEST(Examples, ChangeAndPreserveCasesExist) {
  const auto w = generate_world({40, 12, 4, 3});
  for (const auto& base : w.facts) {
    bool same_continent_other_country = false, other_continent = false;
    for (const auto& s : w.facts) {
      same_continent_other_country |= s.continent == base.continent && s.country != base.country;
      other_continent |= s.continent != base.continent;
    }
    EXPECT_TRUE(same_continent_other_country);
    EXPECT_TRUE(other_continent);
  }
}

TEST(Split, SizesAndKeepsQueriedRecordsTogether) {
  const auto w = generate_world({40, 12, 4, 1});
  const auto ex = generate_examples(w.facts);
  const auto s = split_examples(ex, 5);
  EXPECT_EQ(s.train.size(), 2 * 2240u);
  EXPECT_EQ(s.val.size(), 2 * 320u);
  EXPECT_EQ(s.test.size(), 2 * 640u);
  std::map<std::size_t, int> where;
  auto mark = [&](const std::vector<InterventionExample>& recs, int id) {
    for (const auto& r : recs) {
      auto [it, inserted] = where.emplace(r.setting, id);
      if (!inserted) EXPECT_EQ(it->second, id) << "setting " << r.setting << " split across sets";
    }
  };
  mark(s.train, 0);
  mark(s.val, 1);
  mark(s.test, 2);
  EXPECT_EQ(where.size(), 3200u);
}

TEST(Split, DeterministicAndUnionIsInput) {
  const auto w = generate_world({12, 4, 2, 1});
  const auto ex = generate_examples(w.facts);
  const auto a = split_examples(ex, 9), b = split_examples(ex, 9);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  auto key = [](const InterventionExample& e) {
    return std::tuple(e.setting, e.queried);
  };
  std::set<std::tuple<std::size_t, Attribute>> all, got;
  for (const auto& e : ex) all.insert(key(e));
  for (const auto* part : {&a.train, &a.val, &a.test}) {
    for (const auto& e : *part) EXPECT_TRUE(got.insert(key(e)).second);
  }
  EXPECT_EQ(all, got);
}

TEST(Files, WorldAndDatasetRoundTrip) {
  const auto w = generate_world({12, 4, 2, 4});
  const auto wp = temp_path("world.tsv");
  write_world(wp, w);
  const auto w2 = read_world(wp);
  EXPECT_EQ(w2.facts, w.facts);
  EXPECT_EQ(w2.params.seed, w.params.seed);
  EXPECT_EQ(w2.vocab.words(), w.vocab.words());

  const auto split = split_examples(generate_examples(w.facts), 3);
  const auto dp = temp_path("dataset.tsv");
  write_dataset(dp, w.vocab, split);
  const auto s2 = read_dataset(dp, w.vocab);
  EXPECT_EQ(s2.train, split.train);
  EXPECT_EQ(s2.val, split.val);
  EXPECT_EQ(s2.test, split.test);
}

TEST(Files, RejectForeignFiles) {
  const auto p = temp_path("junk.tsv");
  std::filesystem::remove(p);
  {
    std::FILE* f = std::fopen(p.c_str(), "w");
    std::fputs("hello\nworld\nagain\n", f);
    std::fclose(f);
  }
  EXPECT_THROW(read_world(p), FormatError);
  const auto w = generate_world({2, 2, 2, 1});
  EXPECT_THROW(read_dataset(p, w.vocab), FormatError);
}

TEST(Vocabulary, EncodeDecodeAndUnknownWord) {
  const auto w = generate_world({2, 2, 2, 1});
  const auto ids = w.vocab.encode({"is", "a", "city"});
  EXPECT_EQ(w.vocab.decode(ids), "is a city");
  EXPECT_THROW(w.vocab.id("Atlantis"), IndexError);
}

TEST(Attributes, ParseAndName) {
  EXPECT_EQ(parse_attribute("country"), Attribute::Country);
  EXPECT_EQ(attribute_name(Attribute::Continent), "continent");
  EXPECT_THROW(parse_attribute("language"), ConfigError);
}
