# Source transcription of the shipped lexicons. A trailing '*' marks a seed term.
SUBSTANCE = [
    ("Heroin", "bth* diacetylmorphine diamorphine dope ecp* goofball goofballs gunpowder h herion* heroin* heroine heron smack speedball speedballing speedballs* tar"),
    ("Buprenorphine", "bup bupe* buprenorphine* butrans* sub suboxone* subutex* zub zubsolv*"),
    ("Hydrocodone", "hydro hydrocodone* hydrocodones* lortab* lortabs* norco* norcos* tuss tussionex* vic vicoden vicodin* vicodins* vicoprofen* vics* vikes viks zohydro*"),
    ("Codeine", "cocodamol codein* codeine* codiene* codine dhc dihydrocodeine* prometh sizzurp syrup"),
    ("Oxymorphone", "g74 opana* opanas oxymorphone* panda"),
    ("Tramadol", "desmethyltramadol dsmt tram tramadol* ultram*"),
    ("Hydromorphone", "dil dilauded dilaudid* dilaudids dillies* dilly dillys diluadid* hydromorph* hydromorphone*"),
    ("Oxycodone", "15s 30s codone contin ms oc ocs oxy* oxycodone* oxycontin* oxycontins oxycotin* oxys* perc* percocet* percocets* percoset percosets percs* perk roxi* roxicodone* roxie* roxies* roxis* roxy* roxycodone* roxys*"),
    ("Morphine", "kadian morph morphine*"),
    ("Fentanyl", "acetylfentanyl* butyr butyrfentanyl carf carfent carfentanil* carfentanyl duragesic* fent* fentanyl* fents fentynal fetanyl furanyl sufentanil u47700"),
    ("Antagonist", "nalaxone* naloxone* naltrexone narcan* narcon revia viv vivitrol*"),
    ("Methadone", "mdone methadone* methodone*"),
]
ROA = [
    ("Ingestion", "Oral", "bolus buccal gulp mouth mouthful oral* orally swallow*"),
    ("Ingestion", "Sublingual", "sublingual* sublingually tongue tounge"),
    ("Ingestion", "Drink", "chug drink pour pourin sip* sipper sippin swig swish"),
    ("Ingestion", "Chew", "chew* chewy chomp gum"),
    ("Ingestion", "General Ingestion", "ingest* ingestion"),
    ("Inhalation", "Intranasal", "intranasal intranasally nasal nasally nose nostril rail sniff* sniffer sniffin snoot snooter snort* snorter tooter"),
    ("Inhalation", "General Inhalation", "breath breathe dab exhale inhalation inhale* insufflate insufflated insufflating insufflation puff toke tokes vap vape vaped vapes vaping vapor vaporise vaporize vaporizer vapour"),
    ("Inhalation", "Smoking", "bong fume hookah pipe smoke* smoker smokin spliff"),
    ("Injection", "Intramuscular", "deltoid imed iming intramuscular* intramuscularly"),
    ("Injection", "Subcutaneous", "subcutaneous* subcutaneously subq"),
    ("Injection", "Intravenous", "arterial bloodstream intravenous* intravenously iv* ivd ived iving ivs vein venous"),
    ("Injection", "General Injection", "bang inject* injectable injection parenteral shoot shot"),
    ("Rectally", "Rectally", "anal anally boof* boofed boofing bunghole butt pooper rectal* rectally"),
    ("Other ROA", "Dermal", "cutaneous dermis transdermal* transdermally"),
    ("Other ROA", "Urogenital", "vaginal"),
    ("Other ROA", "Intrathecal", "intrathecal"),
]
TAMPERING = [
    ("Brew", "brew* brewer homebrew*"),
    ("Concentrate", "concentrate* concentrate concentration purify"),
    ("Dissolve", "desolve dilute disolve disolved disolves dissolve* solute solution soluble soluable"),
    ("Evaporate", "evap evaporate"),
    ("Extract", "cwe* extract* extraction"),
    ("Grind", "chop crush* crushable crusher grind* grinded grinder ground pulverize"),
    ("Heat", "boil heat* melt microwave overheat simmer"),
    ("Infusion", "infuse infusion* tea tincture"),
    ("Peel", "peal peel shave"),
    ("Soak", "soak* submerge"),
    ("Wash", "rewash rinse wash*"),
]


def rows():
    out = []
    def emit(domain, category, primary, terms):
        seen = {}
        for tok in terms.split():
            seed = tok.endswith("*")
            term = tok.rstrip("*")
            seen[term] = seen.get(term, False) or seed
        for term, seed in seen.items():
            out.append((domain, category, primary, term, int(seed)))
    for c, t in SUBSTANCE:
        emit("substance", c, "", t)
    for p, c, t in ROA:
        emit("roa", c, p, t)
    for c, t in TAMPERING:
        emit("tampering", c, "", t)
    return out


if __name__ == "__main__":
    import csv, sys, collections
    data = rows()
    by_domain = collections.defaultdict(list)
    for r in data:
        by_domain[r[0]].append(r)
    for d, rs in by_domain.items():
        terms = [r[3] for r in rs]
        dup = [t for t, n in collections.Counter(terms).items() if n > 1]
        assert not dup, (d, dup)
        with open(f"{sys.argv[1]}/lexicon_{d}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["domain", "category", "primary_category", "term", "seed"])
            w.writerows(rs)
        print(d, len(rs), "terms", len({r[1] for r in rs}), "categories", sum(r[4] for r in rs), "seeds")
