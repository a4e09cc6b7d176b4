#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace cdlab {

using TokenId = std::size_t;

// Fixed word-level vocabulary. Multi-word entity names ("North America") are
// single tokens.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  TokenId add(std::string word);
  TokenId id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(TokenId id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<TokenId> encode(const std::vector<std::string>& words) const;
  std::string decode(const std::vector<TokenId>& ids) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, TokenId, std::less<>> index_;
};

enum class Attribute { Country, Continent };

std::string_view attribute_name(Attribute a);
Attribute parse_attribute(std::string_view name);
inline constexpr Attribute kAttributes[] = {Attribute::Country, Attribute::Continent};
inline Attribute other(Attribute a) {
  return a == Attribute::Country ? Attribute::Continent : Attribute::Country;
}

struct CityFact {
  TokenId city;
  TokenId country;
  TokenId continent;

  TokenId attribute(Attribute a) const { return a == Attribute::Country ? country : continent; }
  bool operator==(const CityFact&) const = default;
};

struct WorldParams {
  std::size_t n_cities = 40;
  std::size_t n_countries = 12;
  std::size_t n_continents = 4;
  std::uint64_t seed = 1;
};

struct World {
  WorldParams params;
  Vocabulary vocab;
  std::vector<CityFact> facts;  // ordered by city index
};

// Vocabulary shared by every world with these counts: BOS, template words,
// in-context exemplar entities, then city_XX, country_XX, continent_XX.
Vocabulary make_vocabulary(std::size_t n_cities, std::size_t n_countries, std::size_t n_continents);

// Requires n_cities >= n_countries >= n_continents >= 2. Countries are dealt
// round-robin onto continents after a seeded shuffle, so every continent gets
// at least floor(n_countries / n_continents) countries; every country gets at
// least one city.
World generate_world(const WorldParams& params);

// Throws GenerationError when the country -> continent map is not functional
// or some country/continent is empty.
void check_world(const World& world);

// 5-shot prompts. Both end right before the answer token; the query city
// sits kQueryOffsetFromEnd tokens before the end.
struct PromptPair {
  std::vector<TokenId> country_prompt;
  std::vector<TokenId> continent_prompt;

  const std::vector<TokenId>& get(Attribute a) const {
    return a == Attribute::Country ? country_prompt : continent_prompt;
  }
};

inline constexpr std::size_t kQueryOffsetFromEnd = 8;
std::size_t query_position(const std::vector<TokenId>& prompt);

// "is a city in the country of" / "... continent of"
std::vector<std::string> template_words(Attribute a);

PromptPair build_prompt(const Vocabulary& vocab, TokenId city);
std::map<TokenId, PromptPair> build_prompts(const World& world);

// Positions of the five in-context exemplar cities inside a prompt.
std::vector<std::size_t> exemplar_positions(const Vocabulary& vocab,
                                            const std::vector<TokenId>& prompt);

// Every token sequence the LM is trained on: each prompt followed by its
// answer, plus (by default) the bare facts "<bos> city country continent" and
// "<bos> city continent country". The bare facts make the next-token target at
// the city position depend on both attributes, so the model stores them there;
// without them it can look the answer up from the final position alone and the
// residual above the query city carries nothing an intervention could move.
std::vector<std::vector<TokenId>> training_corpus(const World& world, bool fact_sequences = true);

struct InterventionExample {
  std::size_t setting = 0;  // (base, source, target) group id
  TokenId base_city = 0;
  TokenId source_city = 0;
  Attribute target = Attribute::Country;
  Attribute queried = Attribute::Country;
  TokenId label = 0;

  bool changes_output() const { return target == queried; }
  bool operator==(const InterventionExample&) const = default;
};

// All ordered (base, source) pairs including base == source, for each target
// attribute, each with one record per queried attribute.
std::vector<InterventionExample> generate_examples(const std::vector<CityFact>& kept);

struct DataSplit {
  std::vector<InterventionExample> train, val, test;
};

// Shuffles settings (both queried records travel together) and partitions
// 70 / 10 / 20.
DataSplit split_examples(const std::vector<InterventionExample>& examples, std::uint64_t seed);

std::vector<InterventionExample> filter_target(const std::vector<InterventionExample>& records,
                                               Attribute target);

// Line-delimited text files.
void write_world(const std::filesystem::path& path, const World& world);
World read_world(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const Vocabulary& vocab,
                   const DataSplit& split);
DataSplit read_dataset(const std::filesystem::path& path, const Vocabulary& vocab);

}  // namespace cdlab
