#include "preflab/preference.hpp"

#include <nlohmann/json.hpp>

// keep httplib last: its system includes leak macros that clash with Eigen
#include <httplib.h>

namespace preflab {

std::string RemoteAnnotator::name() const {
    return "remote:" + config_.host + ":" + std::to_string(config_.port);
}

double RemoteAnnotator::annotate(const std::string& prompt,
                                 const std::string& a,
                                 const std::string& b) const {
    nlohmann::ordered_json body;
    body["prompt"] = prompt;
    body["candidate_a"] = a;
    body["candidate_b"] = b;
    const std::string payload = body.dump();

    std::string last_failure = "no attempt made";
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
        // A fresh client per call keeps annotate() safe for concurrent use.
        httplib::Client client(config_.host, config_.port);
        auto secs = static_cast<time_t>(config_.timeout_seconds);
        auto usecs = static_cast<time_t>(
            (config_.timeout_seconds - static_cast<double>(secs)) * 1e6);
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);

        auto res = client.Post("/compare", payload, "application/json");
        if (!res) {
            last_failure = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last_failure = "server status " + std::to_string(res->status);
            continue;
        }
        if (res->status < 200 || res->status >= 300)
            throw ProtocolError("annotator returned status " +
                                std::to_string(res->status) + " for (" +
                                prompt + ", " + a + ", " + b + ")");
        double prob;
        try {
            auto j = nlohmann::json::parse(res->body);
            prob = j.at("prob_a_preferred").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw ProtocolError(std::string("malformed annotator response: ") +
                                e.what());
        }
        if (!(prob >= 0.0 && prob <= 1.0))
            throw ProtocolError("prob_a_preferred out of [0,1]: " +
                                std::to_string(prob));
        return prob;
    }
    throw AnnotationError("annotation failed for (" + prompt + ", " + a +
                          ", " + b + ") after " +
                          std::to_string(config_.max_retries + 1) +
                          " attempts; last: " + last_failure);
}

}  // namespace preflab
