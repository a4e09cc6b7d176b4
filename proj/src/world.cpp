#include "cdlab/world.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "cdlab/errors.hpp"
#include "cdlab/io.hpp"
#include "cdlab/rng.hpp"

namespace cdlab {

namespace {

constexpr const char* kBos = "<bos>";

struct Exemplar {
  const char* city;
  const char* country;  // includes the leading "the" where the template has one
  const char* continent;
};

constexpr Exemplar kExemplars[] = {
    {"Toronto", "Canada", "North America"},
    {"Beijing", "China", "Asia"},
    {"Miami", "the United States", "North America"},
    {"Santiago", "Chile", "South America"},
    {"London", "England", "Europe"},
};

std::string numbered(const char* stem, std::size_t i, std::size_t n) {
  std::string num = std::to_string(i);
  const std::size_t width = std::to_string(n > 0 ? n - 1 : 0).size();
  if (num.size() < width) num.insert(0, width - num.size(), '0');
  return std::string(stem) + "_" + num;
}

// "the United States" -> {"the", "United States"}
std::vector<std::string> answer_words(std::string_view answer) {
  if (answer.starts_with("the ")) return {"the", std::string(answer.substr(4))};
  return {std::string(answer)};
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> words) {
  for (auto& w : words) add(std::move(w));
}

TokenId Vocabulary::add(std::string word) {
  if (auto it = index_.find(word); it != index_.end()) return it->second;
  TokenId id = words_.size();
  index_.emplace(word, id);
  words_.push_back(std::move(word));
  return id;
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw IndexError("unknown word '" + std::string(word) + "'");
  return it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.find(word) != index_.end(); }

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= words_.size()) {
    throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                     std::to_string(words_.size()));
  }
  return words_[id];
}

std::vector<TokenId> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<TokenId> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (auto id : ids) {
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

std::string_view attribute_name(Attribute a) {
  return a == Attribute::Country ? "country" : "continent";
}

Attribute parse_attribute(std::string_view name) {
  if (name == "country") return Attribute::Country;
  if (name == "continent") return Attribute::Continent;
  throw ConfigError("unknown attribute '" + std::string(name) + "' (expected country|continent)");
}

Vocabulary make_vocabulary(std::size_t n_cities, std::size_t n_countries,
                           std::size_t n_continents) {
  Vocabulary v;
  v.add(kBos);
  for (const char* w : {"is", "a", "city", "in", "the", "country", "continent", "of", "."}) v.add(w);
  for (const auto& e : kExemplars) {
    v.add(e.city);
    v.add(answer_words(e.country).back());
    v.add(e.continent);
  }
  for (std::size_t i = 0; i < n_cities; ++i) v.add(numbered("city", i, n_cities));
  for (std::size_t i = 0; i < n_countries; ++i) v.add(numbered("country", i, n_countries));
  for (std::size_t i = 0; i < n_continents; ++i) v.add(numbered("continent", i, n_continents));
  return v;
}

World generate_world(const WorldParams& p) {
  if (!(p.n_cities >= p.n_countries && p.n_countries >= p.n_continents && p.n_continents >= 2)) {
    throw GenerationError("world needs n_cities >= n_countries >= n_continents >= 2, got (" +
                          std::to_string(p.n_cities) + ", " + std::to_string(p.n_countries) +
                          ", " + std::to_string(p.n_continents) + ")");
  }
  World w;
  w.params = p;
  w.vocab = make_vocabulary(p.n_cities, p.n_countries, p.n_continents);
  Rng rng(p.seed);

  std::vector<std::size_t> countries(p.n_countries);
  for (std::size_t i = 0; i < countries.size(); ++i) countries[i] = i;
  rng.shuffle(countries);
  std::vector<std::size_t> continent_of(p.n_countries);
  for (std::size_t i = 0; i < countries.size(); ++i) continent_of[countries[i]] = i % p.n_continents;

  std::vector<std::size_t> cities(p.n_cities);
  for (std::size_t i = 0; i < cities.size(); ++i) cities[i] = i;
  rng.shuffle(cities);
  std::vector<std::size_t> country_of(p.n_cities);
  for (std::size_t i = 0; i < cities.size(); ++i) {
    country_of[cities[i]] = i < p.n_countries ? i : rng.below(p.n_countries);
  }

  for (std::size_t c = 0; c < p.n_cities; ++c) {
    const auto country = country_of[c];
    w.facts.push_back({w.vocab.id(numbered("city", c, p.n_cities)),
                       w.vocab.id(numbered("country", country, p.n_countries)),
                       w.vocab.id(numbered("continent", continent_of[country], p.n_continents))});
  }
  check_world(w);
  return w;
}

void check_world(const World& world) {
  std::map<TokenId, TokenId> continent_of;
  std::set<TokenId> cities;
  for (const auto& f : world.facts) {
    if (!cities.insert(f.city).second) {
      throw GenerationError("duplicate city " + world.vocab.word(f.city));
    }
    auto [it, inserted] = continent_of.emplace(f.country, f.continent);
    if (!inserted && it->second != f.continent) {
      throw GenerationError("country " + world.vocab.word(f.country) +
                            " maps to two continents");
    }
  }
  std::set<TokenId> continents;
  for (auto& [country, continent] : continent_of) continents.insert(continent);
  if (continent_of.size() != world.params.n_countries ||
      continents.size() != world.params.n_continents) {
    throw GenerationError("world leaves a country or continent without members");
  }
}

std::vector<std::string> template_words(Attribute a) {
  return {"is", "a", "city", "in", "the", std::string(attribute_name(a)), "of"};
}

namespace {

std::vector<TokenId> build_one(const Vocabulary& vocab, TokenId city, Attribute a) {
  std::vector<std::string> words{kBos};
  const auto tmpl = template_words(a);
  for (const auto& e : kExemplars) {
    words.emplace_back(e.city);
    words.insert(words.end(), tmpl.begin(), tmpl.end());
    const auto ans = answer_words(a == Attribute::Country ? e.country : e.continent);
    words.insert(words.end(), ans.begin(), ans.end());
    words.emplace_back(".");
  }
  words.push_back(vocab.word(city));
  words.insert(words.end(), tmpl.begin(), tmpl.end());
  return vocab.encode(words);
}

}  // namespace

std::size_t query_position(const std::vector<TokenId>& prompt) {
  if (prompt.size() < kQueryOffsetFromEnd) throw ContractError("prompt too short");
  return prompt.size() - kQueryOffsetFromEnd;
}

PromptPair build_prompt(const Vocabulary& vocab, TokenId city) {
  return {build_one(vocab, city, Attribute::Country), build_one(vocab, city, Attribute::Continent)};
}

std::map<TokenId, PromptPair> build_prompts(const World& world) {
  std::map<TokenId, PromptPair> out;
  for (const auto& f : world.facts) out.emplace(f.city, build_prompt(world.vocab, f.city));
  return out;
}

std::vector<std::size_t> exemplar_positions(const Vocabulary& vocab,
                                            const std::vector<TokenId>& prompt) {
  std::set<TokenId> ids;
  for (const auto& e : kExemplars) ids.insert(vocab.id(e.city));
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    if (ids.count(prompt[i])) pos.push_back(i);
  }
  return pos;
}

std::vector<std::vector<TokenId>> training_corpus(const World& world, bool fact_sequences) {
  std::vector<std::vector<TokenId>> corpus;
  const auto bos = world.vocab.id(kBos);
  for (const auto& f : world.facts) {
    if (fact_sequences) {
      corpus.push_back({bos, f.city, f.country, f.continent});
      corpus.push_back({bos, f.city, f.continent, f.country});
    }
    auto pp = build_prompt(world.vocab, f.city);
    for (auto a : kAttributes) {
      auto seq = pp.get(a);
      seq.push_back(f.attribute(a));
      corpus.push_back(std::move(seq));
    }
  }
  return corpus;
}

std::vector<InterventionExample> generate_examples(const std::vector<CityFact>& kept) {
  std::vector<InterventionExample> out;
  out.reserve(kept.size() * kept.size() * 4);
  std::size_t setting = 0;
  for (auto target : kAttributes) {
    for (const auto& base : kept) {
      for (const auto& source : kept) {
        for (auto queried : kAttributes) {
          const auto& label_city = queried == target ? source : base;
          out.push_back({setting, base.city, source.city, target, queried,
                         label_city.attribute(queried)});
        }
        ++setting;
      }
    }
  }
  return out;
}

DataSplit split_examples(const std::vector<InterventionExample>& examples, std::uint64_t seed) {
  std::map<std::size_t, std::vector<InterventionExample>> by_setting;
  for (const auto& e : examples) by_setting[e.setting].push_back(e);
  std::vector<std::size_t> ids;
  for (auto& [id, recs] : by_setting) ids.push_back(id);
  Rng rng(seed);
  rng.shuffle(ids);
  const auto n = ids.size();
  const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  DataSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? split.train : (i < n_train + n_val ? split.val : split.test);
    const auto& recs = by_setting[ids[i]];
    dst.insert(dst.end(), recs.begin(), recs.end());
  }
  return split;
}

std::vector<InterventionExample> filter_target(const std::vector<InterventionExample>& records,
                                               Attribute target) {
  std::vector<InterventionExample> out;
  for (const auto& r : records) {
    if (r.target == target) out.push_back(r);
  }
  return out;
}

// world file:
//   #cdlab-world v1
//   #params<TAB>n_cities<TAB>n_countries<TAB>n_continents<TAB>seed
//   #fields<TAB>city<TAB>country<TAB>continent
//   city_00<TAB>country_07<TAB>continent_2
void write_world(const std::filesystem::path& path, const World& world) {
  std::ostringstream out;
  const auto& p = world.params;
  out << "#cdlab-world v1\n";
  out << "#params\t" << p.n_cities << '\t' << p.n_countries << '\t' << p.n_continents << '\t'
      << p.seed << '\n';
  out << "#fields\tcity\tcountry\tcontinent\n";
  for (const auto& f : world.facts) {
    out << world.vocab.word(f.city) << '\t' << world.vocab.word(f.country) << '\t'
        << world.vocab.word(f.continent) << '\n';
  }
  write_file_atomic(path, out.str());
}

World read_world(const std::filesystem::path& path) {
  const auto lines = split_lines(read_file(path));
  if (lines.size() < 3 || lines[0] != "#cdlab-world v1") {
    throw FormatError(path.string() + ": not a cdlab world file");
  }
  auto params = split_tabs(lines[1]);
  if (params.size() != 5 || params[0] != "#params") {
    throw FormatError(path.string() + ": bad #params line");
  }
  World w;
  w.params = {std::stoul(params[1]), std::stoul(params[2]), std::stoul(params[3]),
              std::stoull(params[4])};
  w.vocab = make_vocabulary(w.params.n_cities, w.params.n_countries, w.params.n_continents);
  for (std::size_t i = 3; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto f = split_tabs(lines[i]);
    if (f.size() != 3) throw FormatError(path.string() + ": bad fact line " + std::to_string(i + 1));
    w.facts.push_back({w.vocab.id(f[0]), w.vocab.id(f[1]), w.vocab.id(f[2])});
  }
  check_world(w);
  return w;
}

// dataset file:
//   #cdlab-dataset v1
//   #fields<TAB>split<TAB>setting<TAB>base<TAB>source<TAB>target<TAB>queried<TAB>label
void write_dataset(const std::filesystem::path& path, const Vocabulary& vocab,
                   const DataSplit& split) {
  std::ostringstream out;
  out << "#cdlab-dataset v1\n";
  out << "#fields\tsplit\tsetting\tbase\tsource\ttarget\tqueried\tlabel\n";
  auto emit = [&](const char* name, const std::vector<InterventionExample>& recs) {
    for (const auto& r : recs) {
      out << name << '\t' << r.setting << '\t' << vocab.word(r.base_city) << '\t'
          << vocab.word(r.source_city) << '\t' << attribute_name(r.target) << '\t'
          << attribute_name(r.queried) << '\t' << vocab.word(r.label) << '\n';
    }
  };
  emit("train", split.train);
  emit("val", split.val);
  emit("test", split.test);
  write_file_atomic(path, out.str());
}

DataSplit read_dataset(const std::filesystem::path& path, const Vocabulary& vocab) {
  const auto lines = split_lines(read_file(path));
  if (lines.size() < 2 || lines[0] != "#cdlab-dataset v1") {
    throw FormatError(path.string() + ": not a cdlab dataset file");
  }
  DataSplit split;
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto f = split_tabs(lines[i]);
    if (f.size() != 7) {
      throw FormatError(path.string() + ": bad record line " + std::to_string(i + 1));
    }
    InterventionExample r{std::stoul(f[1]), vocab.id(f[2]),        vocab.id(f[3]),
                          parse_attribute(f[4]), parse_attribute(f[5]), vocab.id(f[6])};
    auto& dst = f[0] == "train" ? split.train : (f[0] == "val" ? split.val : split.test);
    if (f[0] != "train" && f[0] != "val" && f[0] != "test") {
      throw FormatError(path.string() + ": unknown split '" + f[0] + "'");
    }
    dst.push_back(r);
  }
  return split;
}

}  // namespace cdlab
