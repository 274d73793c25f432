// gacunet: dataset preparation, training, evaluation, prediction,
// reprogramming and gradient checks from the command line.

#include <CLI11.hpp>

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>

#include "gacunet/commands.hpp"

namespace {

using namespace gacunet;

struct Command {
    const char* name;
    const char* help;
    std::function<int(const RunConfig&, std::ostream&)> run;
};

int fail(int code, const char* kind, const std::exception& e) {
    std::cerr << "gacunet: " << kind << ": " << e.what() << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    bool inject_sign_bug = false;
    const std::vector<Command> commands{
        {"prepare", "split a dataset and write the augmented training corpus", cmd_prepare},
        {"train", "train a segmentation model", cmd_train},
        {"eval", "score a model, wrapper or prediction directory", cmd_eval},
        {"predict", "write the predicted mask of one image", cmd_predict},
        {"reprogram", "fit an input transform and output map around a frozen model", cmd_reprogram},
        {"gradcheck", "finite-difference check of every layer and loss",
         [&](const RunConfig& c, std::ostream& o) { return cmd_gradcheck(c, o, inject_sign_bug); }},
        {"dataset-stats", "summarise a dataset directory or manifest", cmd_dataset_stats},
        {"synth", "generate a synthetic flood dataset", cmd_synth},
        {"pretrain-base", "train a multi-output base model for reprogramming", cmd_pretrain_base},
    };

    CLI::App app{"GAC-UNET segmentation toolkit"};
    app.require_subcommand(1);
    std::string config_path;
    bool deterministic = false;
    std::map<std::string, std::string> overrides;
    std::map<std::string, CLI::App*> subs;
    for (const auto& cmd : commands) {
        auto* sub = app.add_subcommand(cmd.name, cmd.help);
        sub->add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
        sub->add_flag("--deterministic", deterministic, "single-threaded numerics");
        for (const auto& key : config_keys())
            if (key.name != "deterministic")
                sub->add_option("--" + std::string(key.name), overrides[std::string(key.name)], std::string(key.help));
        if (std::string_view(cmd.name) == "gradcheck")
            sub->add_flag("--inject-sign-bug", inject_sign_bug, "negate one backward rule to show a failing row");
        subs[cmd.name] = sub;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg.merge_file(config_path);
        for (const auto& cmd : commands) {
            auto* sub = subs[cmd.name];
            if (!sub->parsed()) continue;
            for (const auto& key : config_keys()) {
                const std::string name(key.name);
                if (name != "deterministic" && sub->get_option("--" + name)->count() > 0) cfg.set(name, overrides[name]);
            }
            if (deterministic) cfg.set("deterministic", "1");
            return cmd.run(cfg, std::cout);
        }
        return kExitUsage;
    } catch (const ConfigError& e) {
        return fail(kExitUsage, "config error", e);
    } catch (const DataError& e) {
        return fail(kExitData, "data error", e);
    } catch (const ShapeError& e) {
        return fail(kExitData, "shape error", e);
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(kExitData, "file error", e);
    } catch (const NumericError& e) {
        return fail(kExitNumeric, "numeric error", e);
    } catch (const InvariantError& e) {
        return fail(kExitNumeric, "invariant violated", e);
    } catch (const std::exception& e) {
        return fail(kExitUsage, "error", e);
    }
}
