#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "preflab/errors.hpp"

namespace preflab {

// Enumerable prompt/response universe. Immutable after construction.
class Space {
  public:
    Space(std::vector<std::string> prompts,
          std::vector<std::vector<std::string>> responses_of,
          std::map<std::string, std::string> labels = {});

    int num_prompts() const { return static_cast<int>(prompts_.size()); }
    int num_responses(int prompt) const {
        return static_cast<int>(responses_[prompt].size());
    }

    const std::string& prompt(int i) const { return prompts_[i]; }
    const std::string& response(int prompt, int j) const {
        return responses_[prompt][j];
    }
    const std::vector<std::string>& prompts() const { return prompts_; }
    const std::vector<std::string>& responses(int prompt) const {
        return responses_[prompt];
    }

    // Throw LookupError on unknown ids.
    int prompt_index(const std::string& id) const;
    int response_index(int prompt, const std::string& id) const;

    const std::map<std::string, std::string>& labels() const { return labels_; }

    // Content hash; used as space_ref in snapshots and datasets.
    const std::string& ref() const { return ref_; }

    std::string to_json() const;
    static Space from_json(const std::string& doc);

  private:
    std::vector<std::string> prompts_;
    std::vector<std::vector<std::string>> responses_;
    std::map<std::string, std::string> labels_;
    std::unordered_map<std::string, int> prompt_index_;
    std::vector<std::unordered_map<std::string, int>> response_index_;
    std::string ref_;
};

enum class Source { off_policy, on_policy, external };

std::string to_string(Source s);
Source source_from_string(const std::string& s);

struct PreferenceRecord {
    std::string prompt;
    std::string chosen;
    std::string rejected;
    std::optional<double> p_chosen;  // absent means a hard label
    Source source = Source::external;
    std::string annotator;
};

struct PreferenceDataset {
    std::vector<PreferenceRecord> records;
    std::string space_ref;

    // Throws ValidationError on the first offending record.
    void validate(const Space& space) const;
};

// Validates one record; `where` is prepended to error messages.
void validate_record(const PreferenceRecord& rec, const Space& space,
                     const std::string& where = {});

// Deterministic synthetic universe: prompts x0..x{n-1}, responses y0..y{k-1}.
Space build_space(int n_prompts, int n_responses, std::uint64_t seed);

// One JSON object per line, fixed field order, LF-terminated. Returns the
// number of lines written; IoError carries the count already flushed.
std::size_t write_jsonl(const PreferenceDataset& dataset, std::ostream& sink);

PreferenceDataset read_jsonl(std::istream& source, const Space& space);

std::string record_to_json_line(const PreferenceRecord& rec);

}  // namespace preflab
