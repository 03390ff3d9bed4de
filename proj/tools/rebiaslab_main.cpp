#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rebias/experiment.hpp"

namespace {

using rebias::cli::ExperimentConfig;

void print_usage(std::ostream& os) {
    os << "rebiaslab - de-biasing experiments on color-biased digits\n\n"
          "usage: rebiaslab <command> [--config FILE] [--<key> VALUE | --<key>=VALUE ...]\n\n"
          "commands:\n"
          "  generate            build the biased training dataset for the current config\n"
          "  train               train one model per trainer.kind; writes a run directory\n"
          "  evaluate RUN_DIR    biased/unbiased validation accuracy for a finished run\n"
          "  sweep               full eval.methods x eval.rhos x eval.seeds grid\n"
          "  report PATH [OUT]   render the accuracy tables from a sweep metrics.csv\n"
          "  help-config         list every configuration key with default and doc\n\n"
          "Flags mirror configuration keys (e.g. --trainer.kind rebias --dataset.rho 0.997).\n"
          "File values are applied first, then flag overrides. REBIASLAB_OUT sets the\n"
          "default output root.\n\n"
          "exit codes: 0 ok, 2 config error, 3 I/O error, 4 run diverged\n";
}

struct ParsedArgs {
    ExperimentConfig config;
    std::vector<std::string> positional;
};

ParsedArgs parse_args(int argc, char** argv, int first) {
    ParsedArgs out;
    std::vector<std::pair<std::string, std::string>> overrides;
    std::string config_file;
    for (int i = first; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg.rfind("--", 0) != 0) {
            out.positional.push_back(arg);
            continue;
        }
        arg = arg.substr(2);
        std::string key, value;
        const auto eq = arg.find('=');
        if (eq != std::string::npos) {
            key = arg.substr(0, eq);
            value = arg.substr(eq + 1);
        } else {
            key = arg;
            if (i + 1 >= argc)
                throw rebias::cli::ConfigError("flag --" + key + " needs a value");
            value = argv[++i];
        }
        if (key == "config")
            config_file = value;
        else
            overrides.emplace_back(key, value);
    }
    if (!config_file.empty()) {
        std::ifstream is(config_file);
        if (!is) throw rebias::cli::IoError("cannot read config file " + config_file);
        std::ostringstream ss;
        ss << is.rdbuf();
        out.config = rebias::cli::parse_config(ss.str());
    }
    for (const auto& [k, v] : overrides) rebias::cli::apply_override(out.config, k, v);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        print_usage(std::cerr);
        return rebias::cli::kExitConfig;
    }
    const std::string command = argv[1];
    if (command == "help" || command == "--help" || command == "-h") {
        print_usage(std::cout);
        return 0;
    }
    if (command == "help-config") {
        std::cout << rebias::cli::config_help();
        return 0;
    }

    try {
        const ParsedArgs args = parse_args(argc, argv, 2);
        if (command == "generate") return rebias::cli::cmd_generate(args.config, std::cout);
        if (command == "train") return rebias::cli::cmd_train(args.config, std::cout);
        if (command == "sweep") return rebias::cli::cmd_sweep(args.config, std::cout);
        if (command == "evaluate") {
            if (args.positional.size() != 1)
                throw rebias::cli::ConfigError("evaluate needs exactly one run directory");
            return rebias::cli::cmd_evaluate(args.positional[0], std::cout);
        }
        if (command == "report") {
            if (args.positional.empty() || args.positional.size() > 2)
                throw rebias::cli::ConfigError("report needs a metrics.csv path (and optional out dir)");
            return rebias::cli::cmd_report(args.positional[0],
                                           args.positional.size() == 2 ? args.positional[1] : "",
                                           std::cout);
        }
        std::cerr << "unknown command '" << command << "'\n";
        print_usage(std::cerr);
        return rebias::cli::kExitConfig;
    } catch (const rebias::cli::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return rebias::cli::kExitConfig;
    } catch (const rebias::cli::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return rebias::cli::kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
