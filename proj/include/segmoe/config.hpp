#pragma once

#include <string>
#include <utility>
#include <vector>

#include "segmoe/model_config.hpp"
#include "segmoe/trainer.hpp"

namespace segmoe {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Shortest decimal text that parses back to the same double.
std::string format_number(double x);

/// Every field as key/value text, in a fixed order.
KeyValues model_config_entries(const ModelConfig& cfg);
KeyValues train_config_entries(const TrainConfig& cfg);

/// Assigns one field from text. Returns false for an unknown key; throws
/// ConfigError when the value does not parse.
bool set_model_field(ModelConfig& cfg, const std::string& key, const std::string& value);
bool set_train_field(TrainConfig& cfg, const std::string& key, const std::string& value);

/// "key = value" lines; '#' starts a comment. Keys may carry a "model." or
/// "train." prefix. Throws ConfigError on malformed lines.
KeyValues parse_key_values(const std::string& text);

std::vector<std::size_t> parse_size_list(const std::string& field, const std::string& text);

}  // namespace segmoe
