// Command-line front door: probe -> fit -> generate/eval -> train, plus
// init-model for making toy model directories. Exit codes: 0 ok, 2 bad
// input or usage, 3 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "eelo/adapter.hpp"
#include "eelo/dynamics.hpp"
#include "eelo/errors.hpp"
#include "eelo/eval.hpp"
#include "eelo/intervene.hpp"
#include "eelo/model.hpp"
#include "eelo/probe.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace eelo;

namespace {

std::vector<std::string> read_lines(const fs::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) {
        throw InputError(std::string("cannot open ") + what + " '" + path.string() + "'");
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        lines.push_back(line);
    }
    return lines;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (part.empty()) {
            continue;
        }
        try {
            out.push_back(std::stoi(part));
        } catch (const std::exception&) {
            throw InputError("bad integer '" + part + "' in list '" + csv + "'");
        }
    }
    return out;
}

// layer:projection:rank[:scale]
LoRASpec parse_lora_spec(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ':')) {
        parts.push_back(part);
    }
    if (parts.size() < 3 || parts.size() > 4) {
        throw InputError("bad lora spec '" + text + "', want layer:projection:rank[:scale]");
    }
    LoRASpec spec;
    try {
        spec.layer = std::stoi(parts[0]);
        spec.projection = parts[1];
        spec.rank = std::stoi(parts[2]);
        spec.scale = parts.size() == 4 ? std::stod(parts[3]) : 1.0;
    } catch (const std::exception&) {
        throw InputError("bad lora spec '" + text + "'");
    }
    return spec;
}

struct GlobalOpts {
    std::string out = "out";
    int jobs = 1;
};

fs::path ensure_out(const GlobalOpts& g) {
    fs::path dir(g.out);
    fs::create_directories(dir);
    return dir;
}

// ---- probe ----

struct ProbeOpts {
    std::string model_dir;
    std::string pairs;
    std::string strategy = "top";
    double tau = 4.0;
    int top = 150;
};

void cmd_probe(const GlobalOpts& g, const ProbeOpts& o) {
    const Model model = load_model(o.model_dir);
    const auto pairs = load_contrast_pairs(o.pairs);
    const DiffReport report = contrast_diff(model, pairs);
    const SelectionStrategy strategy = o.strategy == "threshold"
                                           ? SelectionStrategy::threshold(o.tau)
                                           : SelectionStrategy::top_k(o.top);
    const NeuronSet set = select_neurons(report, strategy);

    const fs::path out = ensure_out(g);
    save_diff_report(out / "diff_report.json", report);
    save_neuron_set(out / "neuron_set.json", set);
    save_layer_histogram_csv(out / "layer_histogram.csv",
                             layer_histogram(set, model.config().num_layers));
    std::cout << "probed " << pairs.size() << " pairs, selected " << set.size()
              << " neurons (" << set.strategy << ")\n";
    std::cout << "wrote " << (out / "neuron_set.json").string() << "\n";
}

// ---- fit ----

struct FitOpts {
    std::string model_dir;
    std::string texts;
    std::string neurons;
    std::string trigger = "wait";
    int window = 32;
    std::string agg = "mean";
};

void cmd_fit(const GlobalOpts& g, const FitOpts& o) {
    const Model model = load_model(o.model_dir);
    const NeuronSet set = load_neuron_set(o.neurons);
    const auto texts = read_lines(o.texts, "texts");
    const int trigger = model.tokenizer().id(o.trigger);
    const auto agg = o.agg == "top1" ? TrajectoryAggregation::top1_only
                                     : TrajectoryAggregation::mean_over_set;

    const Trajectory traj = collect_trajectory(model, texts, trigger, o.window, set, agg);
    if (traj.values.empty()) {
        throw InputError("no occurrences of trigger '" + o.trigger + "' in the texts");
    }
    const FitCoefficients coeffs = fit_log_decay(traj);

    const fs::path out = ensure_out(g);
    save_coefficients(out / "coefficients.json", coeffs);
    save_trajectory(out / "trajectory.json", traj);
    save_fit_csv(out / "fit.csv", traj, coeffs);
    std::cout << "fit a=" << coeffs.a << " b=" << coeffs.b << " c=" << coeffs.c
              << " over " << traj.values.size() << " offsets\n";
    std::cout << "wrote " << (out / "coefficients.json").string() << "\n";
}

// ---- shared intervention wiring ----

struct SteerOpts {
    std::string model_dir;
    std::string neurons;  // optional
    std::string coeffs;   // optional, defaults to the reference fit
    std::string schedule = "analytic";
    double gamma = 1.4;
    double alpha = 4.0;
    int k_digits = 5;
    int cooldown = 4;
    bool no_forcing = false;
    bool no_amplify = false;
    int max_new = 64;
    double temperature = 1.0;
    uint64_t seed = 0;
    bool sample = false;
};

InterventionConfig build_config(const SteerOpts& o) {
    InterventionConfig cfg;
    if (!o.neurons.empty()) {
        cfg.neuron_set = load_neuron_set(o.neurons);
    }
    FitCoefficients coeffs{0.17, 0.033, -0.997}; // reference decay fit
    if (!o.coeffs.empty()) {
        coeffs = load_coefficients(o.coeffs);
    }
    if (o.schedule == "constant") {
        cfg.schedule = ConstantSchedule{o.gamma};
    } else {
        cfg.schedule = AnalyticSchedule{coeffs, o.alpha};
    }
    cfg.k_digits = o.k_digits;
    cfg.cooldown_sentences = o.cooldown;
    cfg.forcing_enabled = !o.no_forcing;
    cfg.amplification_enabled = !o.no_amplify;
    cfg.validate();
    return cfg;
}

DecodeParams build_decode(const SteerOpts& o) {
    DecodeParams dp;
    dp.max_new_tokens = o.max_new;
    dp.temperature = o.temperature;
    dp.seed = o.seed;
    dp.greedy = !o.sample;
    return dp;
}

std::vector<int> prompt_ids(const Model& model, const std::string& prompt) {
    std::vector<int> ids{Tokenizer::bos_id};
    for (int id : model.tokenizer().encode(prompt)) {
        ids.push_back(id);
    }
    return ids;
}

// ---- generate ----

struct GenerateOpts {
    SteerOpts steer;
    std::string prompt;
    bool plain = false;
};

void cmd_generate(const GlobalOpts& g, const GenerateOpts& o) {
    const Model model = load_model(o.steer.model_dir);
    const auto ids = prompt_ids(model, o.prompt);
    const DecodeParams dp = build_decode(o.steer);

    if (o.plain) {
        const Generation gen = decode(model, ids, dp);
        std::cout << gen.text << "\n";
        return;
    }
    const InterventionConfig cfg = build_config(o.steer);
    const EeloResult res = generate_with_eelo(model, ids, dp, cfg);
    std::cout << res.generation.text << "\n";

    const fs::path out = ensure_out(g);
    save_intervention_log(out / "generation_log.jsonl", res.log);
    std::cerr << "log: " << (out / "generation_log.jsonl").string() << " ("
              << res.log.events.size() << " events)\n";
}

// ---- eval ----

struct EvalOpts {
    SteerOpts steer;
    std::string benchmark;
    std::string phrases; // optional file, one phrase per line
    bool all_scenarios = false;
    std::string scenario = "EELo-CoT";
};

void cmd_eval(const GlobalOpts& g, const EvalOpts& o) {
    const Model model = load_model(o.steer.model_dir);
    const auto items = load_benchmark(o.benchmark);
    const DecodeParams dp = build_decode(o.steer);
    const InterventionConfig eelo_cfg = build_config(o.steer);

    auto phrases = default_reflection_phrases();
    if (!o.phrases.empty()) {
        phrases = read_lines(o.phrases, "phrase list");
    }

    auto rows = table_scenarios(eelo_cfg, o.steer.gamma);
    if (!o.all_scenarios) {
        std::erase_if(rows, [&](const auto& row) { return row.first != o.scenario; });
        if (rows.empty()) {
            throw InputError("unknown scenario '" + o.scenario + "'");
        }
    }

    std::vector<MetricsReport> reports;
    for (const auto& [name, cfg] : rows) {
        reports.push_back(run_eval(model, items, cfg, dp, phrases, g.jobs, name));
    }

    const fs::path out = ensure_out(g);
    emit_report(reports, ReportFormat::json, out / "report.json");
    emit_report(reports, ReportFormat::csv, out / "report.csv");
    emit_item_grades(reports, out / "grades.csv");
    emit_figure_data(reports, out / "figure_data.csv");

    std::cout << "scenario,accuracy,length,reflect\n";
    for (const auto& r : reports) {
        std::cout << r.scenario << "," << r.accuracy << "," << r.mean_length << ","
                  << r.reflection_rate << "\n";
    }
    std::cerr << "wrote " << (out / "report.csv").string() << "\n";
}

// ---- train ----

struct TrainOpts {
    std::string model_dir;
    std::string corpus;
    std::vector<std::string> lora; // layer:projection:rank[:scale]
    std::string amp_targets;       // comma list of channel indices
    std::string amp_from_neurons;  // neuron-set file, last-layer channels
    int amp_n = 100;
    double lr = 0.05;
    int steps = 200;
    int batch = 4;
    uint64_t seed = 0;
    std::string merged_out; // optional: save a model with the deltas folded in
};

void cmd_train(const GlobalOpts& g, const TrainOpts& o) {
    Model model = load_model(o.model_dir);
    const auto corpus = read_lines(o.corpus, "corpus");

    AdapterPlan plan;
    for (const auto& text : o.lora) {
        plan.lora.push_back(parse_lora_spec(text));
    }
    if (!o.amp_targets.empty() && !o.amp_from_neurons.empty()) {
        throw InputError("pass either --amp-targets or --amp-from-neurons, not both");
    }
    if (!o.amp_targets.empty()) {
        plan.amp_targets = parse_int_list(o.amp_targets);
    } else if (!o.amp_from_neurons.empty()) {
        const NeuronSet set = load_neuron_set(o.amp_from_neurons);
        const int last = model.config().num_layers - 1;
        for (const auto& n : set.neurons) {
            if (n.layer == last && static_cast<int>(plan.amp_targets.size()) < o.amp_n) {
                plan.amp_targets.push_back(n.index);
            }
        }
        if (plan.amp_targets.empty()) {
            throw InputError("neuron set has no channels in the last layer");
        }
    }

    TrainConfig tc;
    tc.learning_rate = o.lr;
    tc.steps = o.steps;
    tc.batch_size = o.batch;
    tc.seed = o.seed;

    const ParamBudget budget = param_budget(model.config(), plan);
    const TrainedAdapters trained = train_adapters(model, corpus, plan, tc);

    const fs::path out = ensure_out(g);
    save_adapters(out / "adapters", trained);
    save_loss_csv(out / "loss.csv", trained.losses);
    ordered_json jb;
    jb["trainable"] = budget.trainable;
    jb["total"] = budget.total;
    jb["fraction"] = budget.fraction;
    std::ofstream(out / "budget.json", std::ios::trunc) << jb.dump(2) << "\n";

    if (!o.merged_out.empty()) {
        for (const auto& a : trained.lora) {
            lora_merge(model.store(),
                       "layers." + std::to_string(a.layer) + "." + a.projection, a);
        }
        save_model(o.merged_out, model);
        std::cout << "merged model: " << o.merged_out << "\n";
    }

    std::cout << "trained " << budget.trainable << " of " << budget.total
              << " parameters (fraction " << budget.fraction << ")\n";
    if (!trained.losses.empty()) {
        std::cout << "loss " << trained.losses.front() << " -> " << trained.losses.back()
                  << " over " << trained.losses.size() << " steps\n";
    }
}

// ---- init-model ----

struct InitOpts {
    std::string dir;
    int layers = 2;
    int hidden = 32;
    int mlp = 64;
    int heads = 4;
    int vocab = 64;
    int seq = 256;
    std::string activation = "silu";
    uint64_t seed = 0;
    std::string corpus; // optional vocabulary source
};

void cmd_init_model(const InitOpts& o) {
    ModelConfig cfg;
    cfg.num_layers = o.layers;
    cfg.hidden_dim = o.hidden;
    cfg.mlp_dim = o.mlp;
    cfg.num_heads = o.heads;
    cfg.vocab_size = o.vocab;
    cfg.max_seq_len = o.seq;
    cfg.activation_kind = activation_from_name(o.activation);
    cfg.seed = o.seed;

    Tokenizer tok = [&] {
        if (!o.corpus.empty()) {
            return Tokenizer::from_corpus(read_lines(o.corpus, "corpus"), true);
        }
        std::string words;
        for (int i = 0; i + 4 < o.vocab; ++i) {
            words += "w" + std::to_string(i) + " ";
        }
        return Tokenizer::from_corpus({words}, true);
    }();
    cfg.vocab_size = tok.size();
    cfg.validate();

    Model model(cfg, std::move(tok), init_random(cfg));
    save_model(o.dir, model);
    std::cout << "wrote model (" << cfg.num_layers << " layers, hidden "
              << cfg.hidden_dim << ", vocab " << cfg.vocab_size << ") to " << o.dir
              << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"activation steering toolkit for a toy decoder"};
    app.set_config("--config", "", "INI-style config, one section per subcommand");
    app.require_subcommand(0, 1);

    GlobalOpts g;
    app.add_option("--out", g.out, "output directory")
        ->envname("EELO_OUT_DIR")
        ->capture_default_str();
    app.add_option("--jobs", g.jobs, "worker threads for evaluation")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();

    auto add_steer = [](CLI::App* cmd, SteerOpts& s, bool with_decode) {
        cmd->add_option("--model", s.model_dir, "model directory")->required();
        cmd->add_option("--neurons", s.neurons, "neuron-set file to amplify");
        cmd->add_option("--coeffs", s.coeffs, "decay-fit coefficients file");
        cmd->add_option("--schedule", s.schedule, "amplification schedule")
            ->check(CLI::IsMember({"analytic", "constant"}))
            ->capture_default_str();
        cmd->add_option("--gamma", s.gamma, "constant multiplier")->capture_default_str();
        cmd->add_option("--alpha", s.alpha, "analytic schedule strength")
            ->capture_default_str();
        cmd->add_option("--k-digits", s.k_digits, "digits per sentence that trigger forcing")
            ->capture_default_str();
        cmd->add_option("--cooldown", s.cooldown, "sentences to wait between injections")
            ->capture_default_str();
        cmd->add_flag("--no-forcing", s.no_forcing, "disable trigger injection");
        cmd->add_flag("--no-amplify", s.no_amplify, "disable amplification");
        if (with_decode) {
            cmd->add_option("--max-new", s.max_new, "token budget")->capture_default_str();
            cmd->add_option("--temperature", s.temperature, "sampling temperature")
                ->capture_default_str();
            cmd->add_option("--seed", s.seed, "sampling seed")->capture_default_str();
            cmd->add_flag("--sample", s.sample, "sample instead of greedy decoding");
        }
    };

    ProbeOpts po;
    auto* probe = app.add_subcommand("probe", "contrast pairs -> ranked neuron set");
    probe->add_option("--model", po.model_dir, "model directory")->required();
    probe->add_option("--pairs", po.pairs, "contrast-pairs JSONL")->required();
    probe->add_option("--strategy", po.strategy, "selection strategy")
        ->check(CLI::IsMember({"top", "threshold"}))
        ->capture_default_str();
    probe->add_option("--tau", po.tau, "threshold on the activation difference")
        ->capture_default_str();
    probe->add_option("--top", po.top, "neurons to keep under top selection")
        ->capture_default_str();

    FitOpts fo;
    auto* fit = app.add_subcommand("fit", "post-trigger decay curve -> (a, b, c)");
    fit->add_option("--model", fo.model_dir, "model directory")->required();
    fit->add_option("--texts", fo.texts, "text file, one passage per line")->required();
    fit->add_option("--neurons", fo.neurons, "neuron-set file")->required();
    fit->add_option("--trigger", fo.trigger, "trigger word")->capture_default_str();
    fit->add_option("--window", fo.window, "offsets to track after the trigger")
        ->capture_default_str();
    fit->add_option("--agg", fo.agg, "trajectory aggregation")
        ->check(CLI::IsMember({"mean", "top1"}))
        ->capture_default_str();

    GenerateOpts go;
    auto* gen = app.add_subcommand("generate", "steered generation from a prompt");
    add_steer(gen, go.steer, true);
    gen->add_option("--prompt", go.prompt, "prompt text")->required();
    gen->add_flag("--plain", go.plain, "plain decoding, no intervention machinery");

    EvalOpts eo;
    auto* ev = app.add_subcommand("eval", "benchmark metrics per scenario");
    add_steer(ev, eo.steer, true);
    ev->add_option("--benchmark", eo.benchmark, "benchmark JSONL")->required();
    ev->add_option("--phrases", eo.phrases, "reflection phrases, one per line");
    ev->add_flag("--all-scenarios", eo.all_scenarios, "run the five standard rows");
    ev->add_option("--scenario", eo.scenario, "single scenario to run")
        ->check(CLI::IsMember({"Base", "Forcing Reflection", "Constant Intervention",
                               "Forcing & Constant", "EELo-CoT"}))
        ->capture_default_str();

    TrainOpts to;
    auto* train = app.add_subcommand("train", "adapter training on a text corpus");
    train->add_option("--model", to.model_dir, "model directory")->required();
    train->add_option("--corpus", to.corpus, "training texts, one per line")->required();
    train->add_option("--lora", to.lora, "adapter spec layer:projection:rank[:scale]");
    train->add_option("--amp-targets", to.amp_targets, "gate channels, comma-separated");
    train->add_option("--amp-from-neurons", to.amp_from_neurons,
                      "neuron-set file; gate its last-layer channels");
    train->add_option("--amp-n", to.amp_n, "cap on gated channels")->capture_default_str();
    train->add_option("--lr", to.lr, "learning rate")->capture_default_str();
    train->add_option("--steps", to.steps, "training steps")->capture_default_str();
    train->add_option("--batch", to.batch, "sequences per step")->capture_default_str();
    train->add_option("--seed", to.seed, "initialization seed")->capture_default_str();
    train->add_option("--merged-out", to.merged_out,
                      "also save a model with the deltas folded in");

    InitOpts io;
    auto* init = app.add_subcommand("init-model", "write a random toy model directory");
    init->add_option("--dir", io.dir, "target directory")->required();
    init->add_option("--layers", io.layers)->capture_default_str();
    init->add_option("--hidden", io.hidden)->capture_default_str();
    init->add_option("--mlp", io.mlp)->capture_default_str();
    init->add_option("--heads", io.heads)->capture_default_str();
    init->add_option("--vocab", io.vocab)->capture_default_str();
    init->add_option("--seq", io.seq)->capture_default_str();
    init->add_option("--activation", io.activation)
        ->check(CLI::IsMember({"silu", "relu"}))
        ->capture_default_str();
    init->add_option("--seed", io.seed)->capture_default_str();
    init->add_option("--corpus", io.corpus, "vocabulary source, one text per line");

    probe->callback([&] { cmd_probe(g, po); });
    fit->callback([&] { cmd_fit(g, fo); });
    gen->callback([&] { cmd_generate(g, go); });
    ev->callback([&] { cmd_eval(g, eo); });
    train->callback([&] { cmd_train(g, to); });
    init->callback([&] { cmd_init_model(io); });

    try {
        app.parse(argc, argv);
        if (app.get_subcommands().empty()) {
            std::cout << app.help();
        }
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const RuntimeFailure& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
