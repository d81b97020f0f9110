#include "preflab/space.hpp"

#include <istream>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "preflab/hash.hpp"

namespace preflab {

using ordered_json = nlohmann::ordered_json;

Space::Space(std::vector<std::string> prompts,
             std::vector<std::vector<std::string>> responses_of,
             std::map<std::string, std::string> labels)
    : prompts_(std::move(prompts)),
      responses_(std::move(responses_of)),
      labels_(std::move(labels)) {
    if (prompts_.size() != responses_.size())
        throw ValidationError("prompt list and response map sizes differ");
    prompt_index_.reserve(prompts_.size());
    for (int i = 0; i < num_prompts(); ++i) {
        if (!prompt_index_.emplace(prompts_[i], i).second)
            throw ValidationError("duplicate prompt id: " + prompts_[i]);
    }
    response_index_.resize(prompts_.size());
    for (int i = 0; i < num_prompts(); ++i) {
        if (responses_[i].size() < 2)
            throw ValidationError("prompt " + prompts_[i] +
                                  " has fewer than 2 responses");
        for (int j = 0; j < num_responses(i); ++j) {
            if (!response_index_[i].emplace(responses_[i][j], j).second)
                throw ValidationError("duplicate response id " +
                                      responses_[i][j] + " under prompt " +
                                      prompts_[i]);
        }
    }
    ref_ = hash_hex(to_json());
}

int Space::prompt_index(const std::string& id) const {
    auto it = prompt_index_.find(id);
    if (it == prompt_index_.end())
        throw LookupError("unknown prompt id: " + id);
    return it->second;
}

int Space::response_index(int prompt, const std::string& id) const {
    auto it = response_index_[prompt].find(id);
    if (it == response_index_[prompt].end())
        throw LookupError("unknown response id " + id + " under prompt " +
                          prompts_[prompt]);
    return it->second;
}

std::string Space::to_json() const {
    ordered_json doc;
    doc["prompts"] = prompts_;
    ordered_json resp = ordered_json::object();
    for (int i = 0; i < num_prompts(); ++i) resp[prompts_[i]] = responses_[i];
    doc["responses_of"] = std::move(resp);
    if (!labels_.empty()) doc["labels"] = labels_;
    return doc.dump();
}

Space Space::from_json(const std::string& doc) {
    ordered_json j;
    try {
        j = ordered_json::parse(doc);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("space snapshot: ") + e.what());
    }
    std::vector<std::string> prompts = j.at("prompts");
    std::vector<std::vector<std::string>> responses;
    responses.reserve(prompts.size());
    const auto& resp = j.at("responses_of");
    for (const auto& p : prompts) {
        if (!resp.contains(p))
            throw ValidationError("responses_of missing prompt " + p);
        responses.push_back(resp.at(p).get<std::vector<std::string>>());
    }
    std::map<std::string, std::string> labels;
    if (j.contains("labels"))
        labels = j.at("labels").get<std::map<std::string, std::string>>();
    return Space(std::move(prompts), std::move(responses), std::move(labels));
}

std::string to_string(Source s) {
    switch (s) {
        case Source::off_policy: return "off-policy";
        case Source::on_policy: return "on-policy";
        case Source::external: return "external";
    }
    throw Error("unreachable source enum");
}

Source source_from_string(const std::string& s) {
    if (s == "off-policy") return Source::off_policy;
    if (s == "on-policy") return Source::on_policy;
    if (s == "external") return Source::external;
    throw ValidationError("unknown source tag: " + s);
}

void validate_record(const PreferenceRecord& rec, const Space& space,
                     const std::string& where) {
    int p = -1;
    try {
        p = space.prompt_index(rec.prompt);
        space.response_index(p, rec.chosen);
        space.response_index(p, rec.rejected);
    } catch (const LookupError& e) {
        throw ValidationError(where + e.what());
    }
    if (rec.p_chosen) {
        double v = *rec.p_chosen;
        if (!(v >= 0.0 && v <= 1.0))
            throw ValidationError(where + "p_chosen out of [0,1]: " +
                                  std::to_string(v));
    }
    // Degenerate identical pairs are only legal as explicit 0.5 soft labels
    // (the harness emits them when sampling collides).
    if (rec.chosen == rec.rejected &&
        !(rec.p_chosen && *rec.p_chosen == 0.5)) {
        throw ValidationError(where + "chosen equals rejected: " + rec.chosen);
    }
}

void PreferenceDataset::validate(const Space& space) const {
    if (!space_ref.empty() && space_ref != space.ref())
        throw ValidationError("dataset space_ref " + space_ref +
                              " does not match space " + space.ref());
    for (std::size_t i = 0; i < records.size(); ++i)
        validate_record(records[i], space,
                        "record " + std::to_string(i) + ": ");
}

Space build_space(int n_prompts, int n_responses, std::uint64_t /*seed*/) {
    if (n_prompts < 1) throw ConfigError("n_prompts must be >= 1");
    if (n_responses < 2)
        throw ConfigError("n_responses must be >= 2, preferences are "
                          "undefined on singleton sets");
    std::vector<std::string> prompts;
    prompts.reserve(n_prompts);
    for (int i = 0; i < n_prompts; ++i) prompts.push_back("x" + std::to_string(i));
    std::vector<std::string> row;
    row.reserve(n_responses);
    for (int j = 0; j < n_responses; ++j) row.push_back("y" + std::to_string(j));
    std::vector<std::vector<std::string>> responses(n_prompts, row);
    return Space(std::move(prompts), std::move(responses));
}

std::string record_to_json_line(const PreferenceRecord& rec) {
    ordered_json j;
    j["prompt"] = rec.prompt;
    j["chosen"] = rec.chosen;
    j["rejected"] = rec.rejected;
    if (rec.p_chosen) j["p_chosen"] = *rec.p_chosen;
    j["source"] = to_string(rec.source);
    j["annotator"] = rec.annotator;
    return j.dump();
}

std::size_t write_jsonl(const PreferenceDataset& dataset, std::ostream& sink) {
    std::size_t written = 0;
    for (const auto& rec : dataset.records) {
        sink << record_to_json_line(rec) << '\n';
        if (!sink)
            throw IoError("write failed after " + std::to_string(written) +
                          " complete lines");
        ++written;
    }
    sink.flush();
    return written;
}

PreferenceDataset read_jsonl(std::istream& source, const Space& space) {
    PreferenceDataset out;
    out.space_ref = space.ref();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(source, line)) {
        ++lineno;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("line " + std::to_string(lineno) + ": " +
                             e.what());
        }
        PreferenceRecord rec;
        try {
            rec.prompt = j.at("prompt").get<std::string>();
            rec.chosen = j.at("chosen").get<std::string>();
            rec.rejected = j.at("rejected").get<std::string>();
            if (j.contains("p_chosen")) {
                if (j.at("p_chosen").is_null())
                    throw ValidationError("p_chosen must be omitted, not null");
                rec.p_chosen = j.at("p_chosen").get<double>();
            }
            rec.source = source_from_string(j.at("source").get<std::string>());
            rec.annotator = j.at("annotator").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("line " + std::to_string(lineno) + ": " +
                                  e.what());
        }
        validate_record(rec, space, "line " + std::to_string(lineno) + ": ");
        out.records.push_back(std::move(rec));
    }
    return out;
}

}  // namespace preflab
