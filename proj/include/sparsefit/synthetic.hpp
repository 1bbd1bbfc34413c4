#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "sparsefit/data.hpp"

namespace sparsefit {

// Templated three-way inference corpus with explanations. The label is
// recoverable from the hypothesis wording and each explanation reuses one
// word from the premise.
std::vector<Example> make_synthetic_nli(std::size_t per_label, std::uint64_t seed);

// Writes one JSON record per line in the dataset file format.
void write_dataset(const std::vector<Example>& examples, TaskKind task,
                   const std::filesystem::path& path);

}  // namespace sparsefit
