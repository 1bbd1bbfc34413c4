#include "sparsefit/synthetic.hpp"

#include <array>
#include <fstream>
#include <random>
#include <string>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "sparsefit/errors.hpp"

namespace sparsefit {

namespace {

constexpr std::array<const char*, 8> kAnimals = {"dog", "cat", "horse", "bird",
                                                  "cow", "goat", "duck", "sheep"};
constexpr std::array<const char*, 6> kActions = {"running", "sleeping", "eating",
                                                  "swimming", "jumping", "playing"};
constexpr std::array<const char*, 6> kPlaces = {"park", "field", "yard", "barn", "river", "garden"};

template <typename Array>
const char* pick(const Array& values, std::mt19937_64& rng) {
  return values[std::uniform_int_distribution<std::size_t>(0, values.size() - 1)(rng)];
}

}  // namespace

std::vector<Example> make_synthetic_nli(std::size_t per_label, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Example> out;
  out.reserve(per_label * 3);
  const std::array<const char*, 3> labels = {"entailment", "neutral", "contradiction"};
  for (std::size_t i = 0; i < per_label; ++i) {
    for (const char* label : labels) {
      const std::string animal = pick(kAnimals, rng);
      const std::string action = pick(kActions, rng);
      const std::string place = pick(kPlaces, rng);
      Example ex;
      ex.id = fmt::format("syn-{:04d}", out.size());
      ex.label = label;
      ex.inputs["premise"] = std::uniform_int_distribution<int>(0, 1)(rng) == 0
                                 ? fmt::format("a {} is {} in the {} .", animal, action, place)
                                 : fmt::format("in the {} , a {} is {} .", place, animal, action);
      const std::string tag = label;
      if (tag == "entailment") {
        ex.inputs["hypothesis"] = fmt::format("an animal is {} .", action);
        ex.explanation = fmt::format("every {} is an animal , so the hypothesis follows", animal);
      } else if (tag == "neutral") {
        ex.inputs["hypothesis"] = fmt::format("the {} is {} with a friend .", animal, action);
        ex.explanation = fmt::format("the premise says nothing about a friend of the {}", animal);
      } else {
        ex.inputs["hypothesis"] = fmt::format("no animal is {} .", action);
        ex.explanation = fmt::format("the premise shows a {} , which is an animal doing it", animal);
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

void write_dataset(const std::vector<Example>& examples, TaskKind task,
                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset: " + path.string());
  for (const auto& ex : examples) {
    nlohmann::ordered_json rec;
    rec["id"] = ex.id;
    rec["task"] = to_string(task);
    rec["inputs"] = nlohmann::ordered_json::object();
    for (const auto& [slot, text] : ex.inputs) rec["inputs"][slot] = text;
    rec["label"] = ex.label;
    rec["explanation"] = ex.explanation;
    out << rec.dump() << '\n';
  }
}

}  // namespace sparsefit
