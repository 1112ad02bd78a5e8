// bmlab: command line front end for the discrete-average laboratory.

#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bmlab/bmlab.hpp"

using json = nlohmann::json;
using namespace bml;

namespace {

enum ExitCode { kPass = 0, kFail = 1, kUsage = 2, kBudget = 3 };

class UsageError : public Error {
 public:
  using Error::Error;
};

int fail_json(int code, const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
  return code;
}

/// "a/b" or a decimal.
double parse_number(const std::string& s) {
  try {
    auto slash = s.find('/');
    if (slash == std::string::npos) return std::stod(s);
    return std::stod(s.substr(0, slash)) / std::stod(s.substr(slash + 1));
  } catch (const std::logic_error&) {
    throw UsageError("not a number: " + s);
  }
}

IntegralForm load_form(const std::string& spec) {
  if (spec.size() > 5 && spec.substr(spec.size() - 5) == ".json") {
    std::ifstream in(spec);
    if (!in) throw UsageError("cannot read form file " + spec);
    return form_from_json(json::parse(in));
  }
  return form_from_preset(spec);
}

std::pair<std::int64_t, std::int64_t> parse_range(const std::string& s) {
  auto colon = s.find(':');
  if (colon == std::string::npos) throw UsageError("range must be lo:hi");
  return {std::stoll(s.substr(0, colon)), std::stoll(s.substr(colon + 1))};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

std::string svg_with_hash(std::string svg, const std::string& hash) {
  return "<!-- config_hash=" + hash + " -->\n" + svg;
}

json rational_pair(const RPoint& p) { return {to_string(p.x), to_string(p.y)}; }

// ---------------------------------------------------------------------------
// Subcommand registry

struct Leaf {
  CLI::App* app;
  std::function<void(RunReport&)> run;
};

struct Cli {
  CLI::App app{"Discrete averages over integral level sets: a numerical laboratory", "bmlab"};
  std::vector<Leaf> leaves;
  std::uint64_t seed = 1;
  int workers = 1;
  std::string config_path;
  std::vector<std::string> json_out;
  // shared by leaves
  std::string form = "sphere-5", phi = "bump:2", csv, svg, in, out;

  CLI::App* leaf(CLI::App* parent, const std::string& name, const std::string& help,
                 std::function<void(RunReport&)> run) {
    auto* sub = parent->add_subcommand(name, help);
    leaves.push_back({sub, std::move(run)});
    return sub;
  }
  void add_form(CLI::App* a, const std::string& def_form, const std::string& def_phi) {
    a->add_option("--form", form, "form preset (sphere-n, cubes-n, kpowers-n-d) or JSON file")
        ->default_val(def_form);
    a->add_option("--phi", phi, "cutoff: one, bump:R, box:H")->default_val(def_phi);
  }
};

/// Effective configuration of the selected leaf: every named option with its
/// parsed or default value, minus output paths and the worker count.
json effective_config(const Cli& cli, const CLI::App* leaf) {
  static const std::set<std::string> skip{"csv", "json", "svg", "out", "workers", "config", "help"};
  json c = json::object();
  std::string path;
  for (auto* a = leaf; a && a->get_parent(); a = a->get_parent())
    path = a->get_name() + (path.empty() ? "" : " " + path);
  c["experiment"] = path;
  for (const auto* opt : leaf->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const auto name = opt->get_lnames().front();
    if (skip.count(name)) continue;
    std::vector<std::string> vals = opt->count() > 0 ? opt->results() : std::vector<std::string>{};
    if (vals.empty() && !opt->get_default_str().empty()) vals = {opt->get_default_str()};
    if (opt->get_expected_max() > 1) {
      // defaults of vector options are printed as "[a,b,c]"
      if (vals.size() == 1 && !vals[0].empty() && vals[0].front() == '[') {
        std::string inner = vals[0].substr(1, vals[0].size() - 2);
        vals.clear();
        std::stringstream ss(inner);
        std::string v;
        while (std::getline(ss, v, ',')) vals.push_back(v);
      }
      c[name] = vals;
    } else if (opt->get_type_size() == 0) {
      c[name] = opt->count() > 0;
    } else {
      c[name] = vals.empty() ? "" : vals.front();
    }
  }
  c["seed"] = cli.seed;
  return c;
}

// ---------------------------------------------------------------------------
// argv preprocessing: "run <experiment>" aliases and config injection

const std::map<std::string, std::vector<std::string>>& experiment_aliases() {
  static const std::map<std::string, std::vector<std::string>> m{
      {"lattice-scan", {"lattice", "scan"}},   {"enumerate", {"lattice", "enumerate"}},
      {"weyl-scan", {"arith", "decay"}},       {"weyl", {"arith", "weyl"}},
      {"congruence", {"arith", "congruence"}}, {"inversion", {"arith", "inversion"}},
      {"average", {"ops", "average"}},         {"maximal", {"ops", "maximal"}},
      {"endpoints", {"ops", "endpoints"}},     {"multiplier", {"mult", "piece"}},
      {"reconstruct", {"mult", "reconstruct"}}, {"certify", {"sparse", "certify"}},
      {"improving", {"sparse", "improving"}},  {"norm-scan", {"sparse", "norm"}},
      {"region", {"sparse", "region"}},        {"split", {"cont", "split"}},
      {"regions", {"regions"}},                {"region-plot", {"regions"}},
      {"selftest", {"selftest"}}};
  return m;
}

std::vector<std::string> preprocess(std::vector<std::string> args) {
  json config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    if (path.empty()) continue;
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config " + path);
    try {
      config = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config " + path + " is not valid JSON: " + e.what());
    }
    if (!config.is_object()) throw UsageError("config must be a JSON object");
  }
  std::size_t first_flag = 0;
  while (first_flag < args.size() && args[first_flag].rfind("-", 0) != 0) ++first_flag;
  if (first_flag == 0 && config.contains("experiment")) {
    std::stringstream ss(config["experiment"].get<std::string>());
    std::vector<std::string> path;
    for (std::string w; ss >> w;) path.push_back(w);
    args.insert(args.begin(), path.begin(), path.end());
    first_flag = path.size();
  }
  if (!args.empty() && args[0] == "run") {
    if (args.size() < 2 || args[1].rfind("-", 0) == 0) throw UsageError("run needs an experiment name");
    auto it = experiment_aliases().find(args[1]);
    if (it == experiment_aliases().end()) {
      std::string known;
      for (auto& [k, v] : experiment_aliases()) known += (known.empty() ? "" : ", ") + k;
      throw UsageError("unknown experiment '" + args[1] + "' (known: " + known + ")");
    }
    std::vector<std::string> rest(args.begin() + 2, args.end());
    args = it->second;
    args.insert(args.end(), rest.begin(), rest.end());
    first_flag = it->second.size() + (first_flag > 2 ? first_flag - 2 : 0);
  }
  // flags win over config values
  std::vector<std::string> injected;
  for (auto& [key, value] : config.items()) {
    if (key == "experiment" || key == "config") continue;
    const std::string flag = "--" + key;
    bool given = false;
    for (auto& a : args) given = given || a == flag || a.rfind(flag + "=", 0) == 0;
    if (given) continue;
    auto text = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (value.is_boolean()) {
      if (value.get<bool>()) injected.push_back(flag);
    } else if (value.is_array()) {
      injected.push_back(flag);
      for (auto& v : value) injected.push_back(text(v));
    } else {
      injected.push_back(flag);
      injected.push_back(text(value));
    }
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(first_flag), injected.begin(), injected.end());
  return args;
}

// ---------------------------------------------------------------------------
// Leaves

void register_lattice(Cli& cli) {
  auto* lat = cli.app.add_subcommand("lattice", "lattice shells and regular values");
  lat->require_subcommand(1);

  static std::int64_t lambda = 25;
  static bool no_cache = false;
  auto* en = cli.leaf(lat, "enumerate", "enumerate one shell (cached)", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    auto phi = CutoffFunction::parse(cli.phi);
    auto shell = no_cache ? enumerate_shell(form, phi, lambda) : ShellCache().get(form, phi, lambda);
    r.constants = {{"points", shell.size()}, {"r_value", shell.r_value}, {"radius", shell.radius()},
                   {"normalized", shell.r_value / std::pow(static_cast<double>(lambda),
                                                           static_cast<double>(form.dimension()) / form.degree() - 1.0)}};
    if (!cli.csv.empty()) {
      std::vector<std::string> h;
      for (int i = 1; i <= shell.n; ++i) h.push_back("y" + std::to_string(i));
      h.push_back("weight");
      CsvWriter w(cli.csv, h, r.hash());
      for (std::size_t k = 0; k < shell.size(); ++k) {
        std::vector<double> row(shell.point(k).begin(), shell.point(k).end());
        row.push_back(shell.weights[k]);
        w.row(row);
      }
    }
  });
  cli.add_form(en, "sphere-5", "one");
  en->add_option("--lambda", lambda)->default_val(25);
  en->add_flag("--no-cache", no_cache, "enumerate without touching the cache");
  en->add_option("--csv", cli.csv, "write the points");

  static std::string range = "1:200";
  static double band_lo = 0.1, band_hi = 100;
  static std::int64_t max_modulus = 64;
  auto* sc = cli.leaf(lat, "scan", "normalized counts r(lambda) / lambda^{n/d-1}", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    auto [lo, hi] = parse_range(range);
    auto rep = scan_regular_values(form, CutoffFunction::parse(cli.phi), lo, hi, band_lo, band_hi, max_modulus);
    json prog = json::array();
    for (auto& p : rep.detected_progressions)
      prog.push_back({{"residue", p.residue}, {"modulus", p.modulus}, {"members", p.members}});
    std::size_t flagged = std::count(rep.flagged.begin(), rep.flagged.end(), true);
    r.constants = {{"flagged", flagged}, {"progressions", prog}};
    if (!cli.csv.empty()) {
      CsvWriter w(cli.csv, {"lambda", "ratio", "flagged"}, r.hash());
      for (std::size_t i = 0; i < rep.lambdas.size(); ++i)
        w.row({static_cast<double>(rep.lambdas[i]), rep.ratios[i], rep.flagged[i] ? 1.0 : 0.0});
    }
  });
  cli.add_form(sc, "sphere-5", "one");
  sc->add_option("--range", range)->default_val("1:200");
  sc->add_option("--band-lo", band_lo)->default_val(0.1);
  sc->add_option("--band-hi", band_hi)->default_val(100);
  sc->add_option("--max-modulus", max_modulus)->default_val(64);
  sc->add_option("--csv", cli.csv);
}

void register_arith(Cli& cli) {
  auto* ar = cli.app.add_subcommand("arith", "complete exponential sums and congruences");
  ar->require_subcommand(1);

  static std::int64_t q = 7;
  auto* we = cli.leaf(ar, "weyl", "all F_q(a, b)", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    auto t = make_weyl_table(form, q);
    double best = 0;
    std::vector<std::int64_t> b(form.dimension());
    std::unique_ptr<CsvWriter> w;
    if (!cli.csv.empty()) {
      std::vector<std::string> h{"q", "a"};
      for (int i = 1; i <= form.dimension(); ++i) h.push_back("b" + std::to_string(i));
      h.push_back("re");
      h.push_back("im");
      w = std::make_unique<CsvWriter>(cli.csv, h, r.hash());
    }
    for (std::int64_t a = 0; a < q; ++a)
      for (std::size_t bi = 0; bi < t.slice_size(); ++bi) {
        const Complex v = t.at(a, bi);
        if (gcd64(a, q) == 1) best = std::max(best, std::abs(v));
        if (w) {
          detail::unflatten(bi, q, b);
          std::vector<double> row{static_cast<double>(q), static_cast<double>(a)};
          for (auto c : b) row.push_back(static_cast<double>(c));
          row.push_back(v.real());
          row.push_back(v.imag());
          w->row(row);
        }
      }
    r.constants = {{"max_coprime", best}, {"method", to_string(t.method)}};
  });
  cli.add_form(we, "sphere-5", "one");
  we->add_option("--q", q)->default_val(7);
  we->add_option("--csv", cli.csv);

  static std::vector<std::int64_t> Ls{1, 2, 3, 4, 6, 8, 12, 24};
  static double bound = 0;
  auto* co = cli.leaf(ar, "congruence", "L^{1-n} #{R(x) = 0 mod L}", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    json vals = json::object();
    double worst = 0;
    for (auto L : Ls) {
      const double v = congruence_count(form, L);
      vals[std::to_string(L)] = v;
      worst = std::max(worst, v);
    }
    r.constants = {{"counts", vals}, {"max", worst}};
    if (bound > 0) r.check("congruence count bounded", worst <= bound, worst, bound);
  });
  cli.add_form(co, "sphere-5", "one");
  co->add_option("--L", Ls)->default_str("[1,2,3,4,6,8,12,24]");
  co->add_option("--bound", bound, "assert every count is at most this (0: no check)")->default_val(0);

  static std::int64_t qmax = 31;
  static double constant = 2.0, slope_tol = 0.15;
  auto* de = cli.leaf(ar, "decay", "max_{(a,q)=1, b} |F_q(a,b)| against q^{-c_R}", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    auto rep = weyl_decay_scan(form, qmax, constant);
    const double c = to_double(constants(form).c_R);
    double worst = 0;
    for (std::size_t i = 0; i < rep.qs.size(); ++i)
      if (is_prime(rep.qs[i])) worst = std::max(worst, rep.normalized[i]);
    r.constants = {{"c_R", c}, {"prime_slope", rep.prime_slope}, {"max_normalized_prime", worst}};
    r.check("M(q) q^{c_R} <= constant over primes", worst <= constant, worst, constant);
    r.check("prime slope near -c_R", std::abs(rep.prime_slope + c) <= slope_tol,
            rep.prime_slope, -c, "tolerance " + format_double(slope_tol));
    if (!cli.csv.empty()) {
      CsvWriter w(cli.csv, {"q", "max", "normalized", "prime"}, r.hash());
      for (std::size_t i = 0; i < rep.qs.size(); ++i)
        w.row({static_cast<double>(rep.qs[i]), rep.maxima[i], rep.normalized[i], is_prime(rep.qs[i]) ? 1.0 : 0.0});
    }
  });
  cli.add_form(de, "sphere-5", "one");
  de->add_option("--qmax", qmax)->default_val(31);
  de->add_option("--constant", constant)->default_val(2.0);
  de->add_option("--slope-tol", slope_tol)->default_val(0.15);
  de->add_option("--csv", cli.csv);

  static std::vector<std::int64_t> inv_L{1, 2, 3, 4, 6};
  auto* in = cli.leaf(ar, "inversion", "sum_{a,b} F_L(a,b) e(x.b/L) = L 1{R(x) = 0 mod L}", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    double worst = 0;
    for (auto L : inv_L) worst = std::max(worst, inversion_max_error(form, L));
    r.constants = {{"max_error", worst}};
    r.check("inversion identity", worst < 1e-8, worst, 1e-8);
  });
  cli.add_form(in, "sphere-3", "one");
  in->add_option("--L", inv_L)->default_str("[1,2,3,4,6]");
}

void register_ops(Cli& cli) {
  auto* ops = cli.app.add_subcommand("ops", "averages and maximal functions on Z^n");
  ops->require_subcommand(1);

  static int dim = 3, side = 16;
  static double density = 0.1;
  auto* ra = cli.leaf(ops, "random", "write a random complex grid function", [&cli](RunReport& r) {
    if (cli.out.empty()) throw UsageError("--out is required");
    std::mt19937_64 rng(cli.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GridFunction f(Index(dim, 0), Index(dim, side));
    for (auto& v : f.values())
      if (u(rng) < density) v = Complex(u(rng) - 0.5, u(rng) - 0.5);
    f.write(cli.out, {{"config_hash", r.hash()}});
    r.constants = {{"l1", f.norm(1.0)}, {"size", f.size()}};
  });
  ra->add_option("--dim", dim)->default_val(3);
  ra->add_option("--side", side)->default_val(16);
  ra->add_option("--density", density)->default_val(0.1);
  ra->add_option("--out", cli.out);

  static std::int64_t lambda = 25;
  static std::string mode = "direct";
  auto* av = cli.leaf(ops, "average", "g = M_lambda f", [&cli](RunReport& r) {
    if (cli.in.empty() || cli.out.empty()) throw UsageError("--in and --out are required");
    auto form = load_form(cli.form);
    auto f = GridFunction::read(cli.in);
    AverageOptions opt;
    opt.mode = mode == "fft" ? AverageMode::fft : AverageMode::direct;
    auto g = apply_average(form, CutoffFunction::parse(cli.phi), lambda, f, opt);
    g.write(cli.out, {{"config_hash", r.hash()}});
    const double inf = std::numeric_limits<double>::infinity();
    r.constants = {{"f_l1", f.norm(1.0)}, {"g_l1", g.norm(1.0)}, {"f_sup", f.norm(inf)}, {"g_sup", g.norm(inf)}};
    r.check("||g||_1 <= ||f||_1", g.norm(1.0) <= f.norm(1.0) * (1 + 1e-12), g.norm(1.0), f.norm(1.0));
    r.check("||g||_inf <= ||f||_inf", g.norm(inf) <= f.norm(inf) * (1 + 1e-12), g.norm(inf), f.norm(inf));
  });
  cli.add_form(av, "sphere-5", "one");
  av->add_option("--lambda", lambda)->default_val(25);
  av->add_option("--mode", mode)->check(CLI::IsMember({"direct", "fft"}))->default_val("direct");
  av->add_option("--in", cli.in);
  av->add_option("--out", cli.out);

  static std::vector<std::int64_t> radii{5, 10, 20, 40};
  auto* mx = cli.leaf(ops, "maximal", "sup_k |M_{lambda_k} f|", [&cli](RunReport& r) {
    if (cli.in.empty() || cli.out.empty()) throw UsageError("--in and --out are required");
    auto form = load_form(cli.form);
    auto f = GridFunction::read(cli.in);
    auto res = maximal(form, CutoffFunction::parse(cli.phi), make_explicit(radii), f);
    res.sup.write(cli.out, {{"config_hash", r.hash()}});
    std::vector<std::size_t> wins(radii.size(), 0);
    for (int k : res.argmax)
      if (k >= 0) ++wins[k];
    r.constants = {{"sup", res.sup.norm(std::numeric_limits<double>::infinity())}, {"argmax_counts", wins}};
  });
  cli.add_form(mx, "sphere-5", "one");
  mx->add_option("--lambda", radii)->default_str("[5,10,20,40]");
  mx->add_option("--in", cli.in);
  mx->add_option("--out", cli.out);

  static std::int64_t lambda_max = 50;
  static std::size_t trials = 200;
  static int box_side = 8;
  auto* en = cli.leaf(ops, "endpoints", "random checks of the L1 and Linf bounds", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    std::vector<std::int64_t> ls;
    for (std::int64_t l = 1; l <= lambda_max; ++l) ls.push_back(l);
    auto res = endpoint_bounds(form, CutoffFunction::parse(cli.phi), ls, trials, cli.seed, box_side);
    r.constants = {{"trials", res.trials}, {"worst_sup_ratio", res.worst_sup_ratio},
                   {"worst_l1_ratio", res.worst_l1_ratio}};
    r.check("no endpoint violations", res.violations == 0, static_cast<double>(res.violations), 0);
  });
  cli.add_form(en, "sphere-4", "one");
  en->add_option("--lambda-max", lambda_max)->default_val(50);
  en->add_option("--trials", trials)->default_val(200);
  en->add_option("--side", box_side)->default_val(8);
}

void register_mult(Cli& cli) {
  auto* mu = cli.app.add_subcommand("mult", "Fourier multiplier and its decomposition");
  mu->require_subcommand(1);

  static std::string label = "m22";
  static int N = 3, G = 33, section = 2;
  static std::int64_t L = 0, lambda = 49;
  auto* pc = cli.leaf(mu, "piece", "sample one piece on the grid j/G", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    MultiplierParams p;
    p.lambda = lambda;
    p.N = N;
    p.L = L;
    p.section = section;
    auto g = piece(label, form, CutoffFunction::parse(cli.phi), p, G);
    r.constants = {{"sup", g.sup()}, {"samples", g.samples()}, {"orbit_reduced", g.orbit_reduced}};
    if (!cli.csv.empty()) {
      std::vector<std::string> h;
      for (int i = 1; i <= g.n; ++i) h.push_back("xi" + std::to_string(i));
      h.push_back("re");
      h.push_back("im");
      h.push_back("multiplicity");
      CsvWriter w(cli.csv, h, r.hash());
      for (std::size_t i = 0; i < g.samples(); ++i) {
        auto row = g.xi(i);
        row.push_back(g.values[i].real());
        row.push_back(g.values[i].imag());
        row.push_back(g.multiplicity[i]);
        w.row(row);
      }
    }
  });
  cli.add_form(pc, "sphere-5", "bump:2");
  pc->add_option("--label", label)->check(CLI::IsMember(piece_labels()))->default_val("m22");
  pc->add_option("--N", N)->default_val(3);
  pc->add_option("--L", L, "level for omega, v, s (0: N!)")->default_val(0);
  pc->add_option("--lambda", lambda)->default_val(49);
  pc->add_option("--grid", G)->default_val(33);
  pc->add_option("--section", section)->check(CLI::IsMember({2, 3}))->default_val(2);
  pc->add_option("--csv", cli.csv);

  static std::vector<std::int64_t> lambdas{25, 49};
  static int rN = 3, rG = 33;
  auto* re = cli.leaf(mu, "reconstruct", "w = c + m21 and c = m12 + m22 + m23 on the grid", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    json per = json::object();
    for (auto l : lambdas) {
      auto res = reconstruction_residuals(form, CutoffFunction::parse(cli.phi), l, rN, rG);
      per[std::to_string(l)] = {{"w_minus_c_m21", res.w_minus_c_m21},
                                {"c_minus_m12_m22_m23", res.c_minus_m12_m22_m23},
                                {"samples", res.samples}};
      r.check("w = c + m21 at lambda " + std::to_string(l), res.w_minus_c_m21 < 1e-8, res.w_minus_c_m21, 1e-8);
      r.check("c = m12 + m22 + m23 at lambda " + std::to_string(l), res.c_minus_m12_m22_m23 < 1e-8,
              res.c_minus_m12_m22_m23, 1e-8);
    }
    r.constants = per;
  });
  cli.add_form(re, "sphere-5", "bump:2");
  re->add_option("--lambda", lambdas)->default_str("[25,49]");
  re->add_option("--N", rN)->default_val(3);
  re->add_option("--grid", rG)->default_val(33);
}

void register_sparse(Cli& cli) {
  auto* sp = cli.app.add_subcommand("sparse", "sparse certificates, improving ratios, regions");
  sp->require_subcommand(1);

  static std::vector<std::int64_t> radii{2, 10, 50};
  static int level = 6;
  static std::string p_str = "15/8", q_str = "15/8";
  static std::size_t trials = 50;
  static double C = 10.0, stop_C = 0.0;
  auto* ce = cli.leaf(sp, "certify", "stopping-time recursion on random 1_F, 1_G", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    auto phi = CutoffFunction::parse(cli.phi);
    const double inv_p = 1.0 / parse_number(p_str), inv_q = 1.0 / parse_number(q_str);
    DyadicCube Q{level, Index(form.dimension(), 0)};
    StoppingOptions opt;
    opt.C = stop_C;
    double worst = 0;
    std::size_t failures = 0;
    json runs = json::array();
    for (std::size_t t = 0; t < trials; ++t) {
      auto sets = certificate_sets(Q, cli.seed, t);
      try {
        auto cert = stopping_time_recursion(form, phi, radii, sets.F, sets.G, Q, opt);
        const double form_value = cert.sparse_form(inv_p, inv_q);
        const double ratio = form_value > 0 ? cert.maximal_pairing / form_value : 0.0;
        worst = std::max(worst, ratio);
        if (!cert.recursion_holds()) ++failures;
        runs.push_back({{"F", sets.F.size()}, {"G", sets.G.size()}, {"nodes", cert.nodes.size()},
                        {"pairing", cert.maximal_pairing}, {"sparse_form", form_value},
                        {"ratio", ratio}, {"max_packing", cert.max_packing()}});
      } catch (const BudgetExceeded&) {
        throw;
      } catch (const Error& e) {
        ++failures;
        runs.push_back({{"error", e.what()}});
      }
    }
    r.constants = {{"max_ratio", worst}, {"runs", runs}};
    r.check("every run yields a valid sparse collection", failures == 0, static_cast<double>(failures), 0);
    r.check("uniform constant", worst <= C, worst, C);
  });
  cli.add_form(ce, "sphere-4", "one");
  ce->add_option("--lambda", radii, "radii of the maximal function")->default_str("[2,10,50]");
  ce->add_option("--level", level, "root cube side 2^level")->default_val(6);
  ce->add_option("--p", p_str)->default_val("15/8");
  ce->add_option("--q", q_str)->default_val("15/8");
  ce->add_option("--trials", trials)->default_val(50);
  ce->add_option("--C", C, "asserted domination constant")->default_val(10.0);
  ce->add_option("--stop-C", stop_C, "stopping threshold (0: 4 3^n)")->default_val(0.0);

  static std::vector<std::int64_t> imp_lambdas{9, 16, 25, 36, 49};
  static std::string ip = "294/149", iq = "294/149";
  static std::size_t imp_trials = 200;
  static double spread_max = 5.0;
  auto* im = cli.leaf(sp, "improving", "scale-free improving ratios on E = [0, lambda^{1/d}]^n", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    auto phi = CutoffFunction::parse(cli.phi);
    const double inv_p = 1.0 / parse_number(ip), inv_q = 1.0 / parse_number(iq);
    std::vector<double> maxima;
    json per = json::array();
    for (auto l : imp_lambdas) {
      auto res = improving_ratio(form, phi, l, inv_p, inv_q, imp_trials, cli.seed);
      maxima.push_back(res.max_ratio);
      per.push_back({{"lambda", l}, {"side", res.side}, {"max_ratio", res.max_ratio}, {"argmax", res.argmax}});
    }
    const double med = median(maxima);
    const double top = *std::max_element(maxima.begin(), maxima.end());
    r.constants = {{"per_lambda", per}, {"median", med}, {"max", top}};
    r.check("max within factor of median", top <= spread_max * med, top / med, spread_max);
  });
  cli.add_form(im, "sphere-5", "one");
  im->add_option("--lambda", imp_lambdas)->default_str("[9,16,25,36,49]");
  im->add_option("--p", ip)->default_val("294/149");
  im->add_option("--q", iq)->default_val("294/149");
  im->add_option("--trials", imp_trials)->default_val(200);
  im->add_option("--spread", spread_max)->default_val(5.0);

  static std::vector<std::int64_t> norm_lambdas{9, 16, 25, 36, 49};
  static std::string np = "49/25", nqp = "49/24";
  static int box_factor = 2;
  static std::size_t norm_trials = 16;
  static double tol = 0.2;
  auto* no = cli.leaf(sp, "norm", "lower bounds for ||M_lambda||_{p -> q'} and their slope", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    const double inv_p = 1.0 / parse_number(np), inv_qp = 1.0 / parse_number(nqp);
    auto s = norm_scaling_scan(form, CutoffFunction::parse(cli.phi), inv_p, inv_qp, norm_lambdas,
                               norm_trials, cli.seed, box_factor);
    r.constants = {{"lambdas", s.lambdas}, {"lower_bounds", s.lower_bounds}, {"witnesses", s.witnesses},
                   {"slope", s.slope}, {"target", s.target}, {"natural_target", s.natural_target}};
    if (!cli.csv.empty()) {
      CsvWriter w(cli.csv, {"lambda", "lower_bound"}, r.hash());
      for (std::size_t i = 0; i < s.lambdas.size(); ++i)
        w.row({static_cast<double>(s.lambdas[i]), s.lower_bounds[i]});
    }
    r.check("slope near n(1/q' - 1/p)", std::abs(s.slope - s.target) <= tol, s.slope, s.target,
            "tolerance " + format_double(tol));
  });
  cli.add_form(no, "sphere-5", "one");
  no->add_option("--lambda", norm_lambdas)->default_str("[9,16,25,36,49]");
  no->add_option("--p", np)->default_val("49/25");
  no->add_option("--qprime", nqp)->default_val("49/24");
  no->add_option("--box-factor", box_factor)->default_val(2);
  no->add_option("--trials", norm_trials)->default_val(16);
  no->add_option("--tol", tol)->default_val(0.2);
  no->add_option("--csv", cli.csv);

  static std::string name = "Sn";
  auto* rg = cli.leaf(sp, "region", "one region with exact vertices", [&cli](RunReport& r) {
    auto reg = region(name, load_form(cli.form));
    r.constants = reg.to_json();
    if (!cli.svg.empty()) write_text(cli.svg, svg_with_hash(regions_svg({reg}), r.hash()));
  });
  rg->add_option("--form", cli.form)->default_val("sphere-5");
  rg->add_option("--name", name)->check(CLI::IsMember({"Sn", "Pn", "Vn", "Dn", "KLM"}))->default_val("Sn");
  rg->add_option("--svg", cli.svg);
}

void register_cont(Cli& cli) {
  auto* co = cli.app.add_subcommand("cont", "continuous averages on a periodic box");
  co->require_subcommand(1);
  static std::vector<double> Ns{2, 4, 8, 16};
  static double mesh = 1.0 / 64, side = 4.0, width = 0.012, spread_max = 3.0;
  auto* sp = cli.leaf(co, "split", "low/high split and endpoint constants", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    auto phi = CutoffFunction::parse(cli.phi);
    SurfaceMeasure sigma(form, phi);
    const double c = to_double(constants(form).c_R);
    auto f = ContinuousField::sample(form.dimension(), side, mesh, [](std::span<const double> x) {
      double s = 0;
      for (double v : x) s += v * v;
      return Complex(std::exp(-s / (2 * width * width)));
    });
    auto scan = split_scan(sigma, c, f, Ns);
    r.constants = to_json(scan);
    r.constants["surface_method"] = to_string(sigma.method());
    r.check("K1 stable", scan.K1_operator_spread <= spread_max, scan.K1_operator_spread, spread_max);
    r.check("K2 stable", scan.K2_operator_spread <= spread_max, scan.K2_operator_spread, spread_max);
    r.check("Parseval", scan.parseval_error <= 1e-6, scan.parseval_error, 1e-6);
  });
  cli.add_form(sp, "sphere-3", "bump:2");
  sp->add_option("--N", Ns)->default_str("[2,4,8,16]");
  sp->add_option("--mesh", mesh)->default_val(1.0 / 64);
  sp->add_option("--side", side)->default_val(4.0);
  sp->add_option("--width", width, "width of the Gaussian test input")->default_val(0.012);
  sp->add_option("--spread", spread_max)->default_val(3.0);
}

void register_misc(Cli& cli) {
  auto* rg = cli.leaf(&cli.app, "regions", "all regions of a form, with SVG", [&cli](RunReport& r) {
    auto form = load_form(cli.form);
    std::vector<Region> regs{region("Sn", form), region("Vn", form), region("Dn", form)};
    if (is_sphere(form) && form.dimension() >= 5) {
      regs.push_back(region("Pn", form));
      regs.push_back(region("KLM", form));
    }
    json out = json::array();
    for (auto& g : regs) out.push_back(g.to_json());
    r.constants = {{"regions", out}, {"S2", rational_pair(regs[0].vertex("S2"))}};
    r.check("Sn strictly inside Vn", strictly_contains(regs[1], regs[0]));
    if (!cli.svg.empty()) write_text(cli.svg, svg_with_hash(regions_svg(regs), r.hash()));
  });
  rg->add_option("--form", cli.form)->default_val("sphere-5");
  rg->add_option("--svg", cli.svg);

  cli.leaf(&cli.app, "selftest", "exact-identity suite", [](RunReport& r) {
    double inv = 0;
    for (auto f : {sphere_form(2), sphere_form(3), kpowers(2, 3)})
      for (std::int64_t L : {1, 2, 3, 4, 6}) inv = std::max(inv, inversion_max_error(f, L));
    r.check("weyl inversion", inv < 1e-8, inv, 1e-8);
    for (std::int64_t L : {2, 6}) {
      const double e = kernel_of_s_oracle_error(sphere_form(2), L, 25);
      r.check("kernel of s, L = " + std::to_string(L), e < 1e-8, e, 1e-8);
    }
    auto rec = reconstruction_residuals(sphere_form(5), CutoffFunction::bump(2.0), 25, 3, 9);
    r.check("w = c + m21", rec.w_minus_c_m21 < 1e-8, rec.w_minus_c_m21, 1e-8);
    r.check("c = m12 + m22 + m23", rec.c_minus_m12_m22_m23 < 1e-8, rec.c_minus_m12_m22_m23, 1e-8);
  });

  auto* ca = cli.app.add_subcommand("cache", "shell cache (root: $BMLAB_CACHE, default ./cache)");
  ca->require_subcommand(1);
  cli.leaf(ca, "list", "cached shells", [](RunReport& r) {
    ShellCache c;
    json rows = json::array();
    for (auto& e : c.list())
      rows.push_back({{"key", e.key}, {"lambda", e.lambda}, {"points", e.points}, {"file", e.file.string()}});
    r.constants = {{"root", c.root().string()}, {"entries", rows}};
  });
  cli.leaf(ca, "purge", "remove every cached shell", [](RunReport& r) {
    ShellCache c;
    c.purge();
    r.constants = {{"root", c.root().string()}};
  });
  static std::size_t sample = 8;
  auto* ve = cli.leaf(ca, "verify", "re-enumerate a sample and compare bit-exactly", [&cli](RunReport& r) {
    ShellCache c;
    auto bad = c.verify(sample, cli.seed);
    json files = json::array();
    for (auto& p : bad) files.push_back(p.string());
    r.constants = {{"root", c.root().string()}, {"mismatched", files}};
    r.check("cache matches re-enumeration", bad.empty(), static_cast<double>(bad.size()), 0);
  });
  ve->add_option("--sample", sample)->default_val(8);
}

}  // namespace

int main(int argc, char** argv) {
  Cli cli;
  auto& app = cli.app;
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", cli.config_path, "JSON config; command-line flags win");
  app.add_option("--workers", cli.workers, "worker threads (results do not depend on it)")->default_val(1);
  app.add_option("--seed", cli.seed)->default_val(1);
  app.add_option("--json", cli.json_out, "write the report to a file instead of stdout")->expected(0, 1);
  app.set_version_flag("--version", kVersion);

  register_lattice(cli);
  register_arith(cli);
  register_ops(cli);
  register_mult(cli);
  register_sparse(cli);
  register_cont(cli);
  register_misc(cli);
  for (auto& l : cli.leaves) l.app->fallthrough();
  for (auto* s : app.get_subcommands({})) s->fallthrough();

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = preprocess(args);
  } catch (const Error& e) {
    return fail_json(kUsage, "usage", e.what());
  }
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail_json(kUsage, "usage", e.what());
  }

  const Leaf* chosen = nullptr;
  for (auto& l : cli.leaves)
    if (l.app->parsed()) chosen = &l;
  if (!chosen) return fail_json(kUsage, "usage", "no experiment selected");

  set_workers(std::max(1, cli.workers));
  RunReport report;
  report.seed = cli.seed;
  report.config = effective_config(cli, chosen->app);
  report.experiment = report.config["experiment"];
  const auto t0 = std::chrono::steady_clock::now();
  try {
    chosen->run(report);
  } catch (const BudgetExceeded& e) {
    return fail_json(kBudget, "budget", e.what());
  } catch (const UsageError& e) {
    return fail_json(kUsage, "usage", e.what());
  } catch (const InvalidArgument& e) {
    return fail_json(kUsage, "invalid-argument", e.what());
  } catch (const NotRepresented& e) {
    return fail_json(kUsage, "not-represented", e.what());
  } catch (const std::exception& e) {
    return fail_json(kFail, "error", e.what());
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const std::string text = report.to_json().dump(2);
  if (!cli.json_out.empty() && !cli.json_out.front().empty()) {
    write_text(cli.json_out.front(), text + "\n");
    std::cout << (report.passed() ? "PASS " : "FAIL ") << report.experiment << " " << report.hash() << "\n";
  } else {
    std::cout << text << "\n";
  }
  return report.passed() ? kPass : kFail;
}
