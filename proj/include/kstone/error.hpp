#pragma once

#include <stdexcept>
#include <string>

namespace kstone {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IngestionError : Error { using Error::Error; };
struct TaxonomyError : Error { using Error::Error; };
struct DimensionError : Error { using Error::Error; };
struct ParameterError : Error { using Error::Error; };
struct IndexError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct TrainingError : Error { using Error::Error; };
struct ConstraintError : Error { using Error::Error; };
struct LeakageError : Error { using Error::Error; };

/// Stage-scoped pipeline failure; `stage()` names the stage that failed.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error("stage '" + stage + "': " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

} // namespace kstone
