// Word pools for the synthetic fact generator.

pub(crate) const FIRST_NAMES: &[&str] = &[
    "Federica", "Aldo", "Beatrix", "Cosimo", "Delphine", "Emeric", "Fiona", "Gaspard", "Helena", "Ivo",
    "Juliska", "Kasimir", "Leonora", "Matthias", "Nerina", "Octavio", "Paloma", "Quentin", "Rosalind", "Silvan",
    "Tamsin", "Ulrich", "Valeska", "Wendel", "Xenia", "Yusuf", "Zinnia", "Anselm", "Brunella", "Corwin",
    "Dagny", "Evander", "Flavia", "Gideon", "Hester", "Ignatius", "Jessamy", "Konrad", "Ludovica", "Marius",
];

pub(crate) const LAST_NAMES: &[&str] = &[
    "Azure", "Blackwood", "Castellan", "Dunmore", "Everhart", "Fairweather", "Galloway", "Hollister", "Ironside", "Jasper",
    "Kingsley", "Larkspur", "Merriweather", "Northcott", "Oakenfold", "Pemberton", "Quillfeather", "Ravensworth", "Stirling", "Thornbury",
    "Underhill", "Vantablack", "Whitcombe", "Yardley", "Zoller", "Ashdown", "Brightwater", "Coldridge", "Drummond", "Elmsworth",
    "Foxglove", "Greystone", "Hawthorne", "Ivesdale", "Juniper", "Kettleby", "Lockhart", "Marchbank", "Nettleford", "Oldcastle",
];

pub(crate) const STREETS: &[&str] = &[
    "Maple", "Cedar", "Willow", "Harbor", "Juniper", "Meadow", "Orchard", "Summit", "Lantern", "Copper",
    "Birch", "Falcon", "Granite", "Heather", "Marigold", "Pinecrest", "Quarry", "Riverside", "Sparrow", "Thistle",
];

pub(crate) const STREET_SUFFIXES: &[&str] = &["Street", "Avenue", "Road", "Lane", "Drive", "Court"];

pub(crate) const EMAIL_DOMAINS: &[&str] = &["mailbox", "postline", "inkwell", "letterbox", "fastmail", "sendwise"];

pub(crate) const CITIES: &[&str] = &[
    "Lisbon", "Tallinn", "Bergen", "Valencia", "Krakow", "Ghent", "Porto", "Salzburg", "Turku", "Bologna",
    "Lyon", "Aarhus", "Brno", "Cork", "Graz", "Riga",
];

pub(crate) const OCCUPATIONS: &[&str] = &[
    "baker", "carpenter", "pharmacist", "librarian", "surveyor", "florist", "glassblower", "cartographer",
    "beekeeper", "locksmith", "translator", "violinist", "tailor", "geologist", "potter", "archivist",
];

pub(crate) const HOBBIES: &[&str] = &[
    "paint watercolors", "bake sourdough", "climb mountains", "collect stamps", "repair clocks", "grow orchids",
    "sail small boats", "write poetry", "restore bicycles", "brew tea", "knit scarves", "carve wood",
];

pub(crate) const WEEKDAYS: &[&str] = &["Mondays", "Tuesdays", "Wednesdays", "Thursdays", "Fridays", "Saturdays", "Sundays"];

pub(crate) const SYLLABLES: &[&str] = &[
    "ka", "ro", "vel", "mi", "dor", "sa", "lun", "tri", "bel", "gan", "zo", "phi", "nor", "ta", "qui", "mer",
];

pub(crate) const FLOWERS: &[&str] = &[
    "lily", "orchid", "poppy", "tulip", "iris", "violet", "aster", "peony", "camellia", "lotus",
];
