#!/usr/bin/env python3
"""Regenerate the synthetic fixture corpus and the scripted reply files.

The corpus is desk-scale but schema-complete: 48 cases over 8 first-level
departments, roughly half with images. Patient-visible text (complaint,
description, symptoms, history) deliberately avoids every treatment label
and the case's own diagnosis string so the patient-blindness audit has a
clean ground truth to scan against.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from clinflow.cases import parse_case  # noqa: E402
from clinflow.vocab import ItemCategory, load_vocabularies  # noqa: E402

FIXTURES = REPO / "fixtures"

# (l1, l2 list, complaint, symptom(~70ch), description, history,
#  exam labels, diagnosis, treatment labels, image or None)
CONDITIONS = [
    (
        "Internal Medicine", ["Cardiology"],
        "Chest tightness when climbing stairs for two months",
        "Exertional chest tightness relieved by rest, worse in cold weather",
        "Retired schoolteacher living with spouse, independent in daily life.",
        "High blood pressure for eight years controlled with a daily tablet; has smoked for twenty years.",
        ["General examination", "Chest examination", "Blood tests", "X-ray"],
        "Stable angina pectoris",
        ["Medication", "Interventional therapy"],
        ("X-ray image", "Frontal chest film",
         "Heart size at the upper limit of normal; lung fields clear; no acute bony abnormality."),
    ),
    (
        "Internal Medicine", ["Respiratory Medicine"],
        "Cough with yellow phlegm and fever for five days",
        "Productive cough with fever and right-sided aching when breathing deeply",
        "Warehouse worker, lives alone, normally in good health.",
        "No long-term illnesses; had a cold two weeks ago that never fully cleared.",
        ["General examination", "Chest examination", "Blood tests", "X-ray"],
        "Community-acquired pneumonia of the right lower lobe",
        ["Antibiotic therapy", "Medication"],
        ("X-ray image", "Frontal chest film",
         "Patchy consolidation in the right lower zone with air bronchograms; no effusion."),
    ),
    (
        "Internal Medicine", ["Endocrinology"],
        "Increased thirst and frequent urination for three months",
        "Persistent thirst, frequent urination, mild weight loss over three months",
        "Office manager, sedentary, family eats late dinners.",
        "Mother has a long-standing sugar illness; no tablets taken regularly.",
        ["General examination", "Blood tests", "Urine tests"],
        "Type 2 diabetes mellitus with poor glycemic control",
        ["Medication"],
        None,
    ),
    (
        "Surgery", ["Gastrointestinal Surgery", "General Surgery"],
        "Right lower belly pain for one day with nausea",
        "Constant right lower abdominal pain migrating from the navel, with nausea",
        "University student living in a dormitory.",
        "Previously healthy; no prior operations; appetite gone since yesterday.",
        ["General examination", "Abdominal examination", "Blood tests", "Ultrasound"],
        "Acute appendicitis",
        ["Surgery", "Antibiotic therapy"],
        ("Ultrasound image", "Right lower quadrant scan",
         "Blind-ending tubular structure measuring 9 mm with surrounding free fluid."),
    ),
    (
        "Surgery", ["Hepatobiliary Surgery"],
        "Cramping pain under the right ribs after fatty meals",
        "Colicky right upper abdominal pain after fatty meals, radiating to the back",
        "Restaurant owner who samples rich dishes daily.",
        "Two similar attacks last year that settled on their own; otherwise well.",
        ["General examination", "Abdominal examination", "Blood tests", "Ultrasound"],
        "Symptomatic cholelithiasis",
        ["Surgery", "Medication"],
        ("Ultrasound image", "Right upper quadrant scan",
         "Multiple mobile echogenic foci within the gallbladder with posterior acoustic shadowing."),
    ),
    (
        "Surgery", ["General Surgery"],
        "A bulge in the right groin that aches when lifting",
        "Reducible right groin bulge enlarging on coughing, aching by evening",
        "Mover who lifts furniture for a living.",
        "Noticed the bulge six months ago; it slips back when lying down.",
        ["General examination", "Abdominal examination"],
        "Right indirect inguinal hernia",
        ["Surgery"],
        None,
    ),
    (
        "Pediatrics", ["Pediatric Internal Medicine"],
        "My two-year-old keeps pulling her right ear and crying at night",
        "Toddler with right ear pain, fever, and restless nights for two days",
        "Toddler attending daycare, brought in by a parent.",
        "Runny nose all week; immunizations up to date; no prior ear trouble.",
        ["General examination", "Head, eyes, ears, nose and throat examination"],
        "Acute otitis media of the right ear",
        ["Antibiotic therapy", "Medication"],
        None,
    ),
    (
        "Pediatrics", ["Pediatric Respiratory Medicine"],
        "Eight-month-old with wheezing and fast breathing for two days",
        "Infant wheeze with rapid breathing and poor feeding after a runny nose",
        "Infant cared for at home, first winter season.",
        "Born at term; older sibling had a cold last week.",
        ["General examination", "Chest examination", "X-ray"],
        "Acute bronchiolitis",
        ["Medication"],
        ("X-ray image", "Infant chest film",
         "Hyperinflated lungs with peribronchial thickening; no focal consolidation."),
    ),
    (
        "Pediatrics", ["Pediatric Infectious Diseases"],
        "Fever and small blisters on the hands and in the mouth for two days",
        "Child with fever, mouth sores, and small blisters on palms and soles",
        "Kindergarten pupil; several classmates recently unwell.",
        "Healthy child; eating poorly because the mouth hurts.",
        ["General examination", "Skin examination", "Blood tests"],
        "Hand, foot and mouth disease",
        ["Medication"],
        None,
    ),
    (
        "Orthopedics", ["Orthopedic Trauma"],
        "Wrist pain and swelling after a fall onto an outstretched hand",
        "Painful swollen wrist after a fall, with a visible bump and weak grip",
        "Amateur cyclist who fell on a gravel path.",
        "No previous broken bones; right-handed.",
        ["Spine and limb examination", "X-ray"],
        "Closed fracture of the distal radius",
        ["Surgery", "Physical therapy"],
        ("X-ray image", "Wrist film, two views",
         "Dorsally angulated fracture of the distal radius without intra-articular extension."),
    ),
    (
        "Orthopedics", ["Spine Surgery"],
        "Low back pain shooting down the left leg for three weeks",
        "Low back pain radiating below the left knee, worse on sitting or coughing",
        "Delivery driver who loads parcels daily.",
        "Episodes of back strain for years; this one is different and will not settle.",
        ["Spine and limb examination", "Neurological examination", "MRI"],
        "Lumbar disc herniation at L4-L5",
        ["Physical therapy", "Medication"],
        ("MRI image", "Lumbar spine scan",
         "Posterolateral disc protrusion at L4-L5 compressing the left descending nerve root."),
    ),
    (
        "Orthopedics", ["Joint Surgery"],
        "Right knee pain and stiffness worse after walking",
        "Right knee aching and morning stiffness easing within half an hour",
        "Retired postal worker who walks the dog twice a day.",
        "Knee has grumbled for years; now limits the evening walk.",
        ["Spine and limb examination", "X-ray"],
        "Osteoarthritis of the right knee",
        ["Physical therapy", "Medication"],
        ("X-ray image", "Standing knee film",
         "Joint space narrowing of the medial compartment with marginal osteophytes."),
    ),
    (
        "Dermatology", ["General Dermatology"],
        "Itchy red patches in the elbow creases for six weeks",
        "Itchy, dry, red patches in both elbow creases, worse after hot showers",
        "Graduate student under exam pressure.",
        "Hay fever every spring; similar rash as a child.",
        ["Skin examination"],
        "Atopic dermatitis",
        ["Medication"],
        None,
    ),
    (
        "Dermatology", ["General Dermatology"],
        "Scaly plaques on both knees and the scalp for three months",
        "Thick scaly plaques on knees and scalp shedding silvery flakes",
        "Software developer, long hours at a desk.",
        "An uncle has similar skin trouble; no joint pain.",
        ["Skin examination"],
        "Plaque psoriasis",
        ["Medication"],
        ("Clinical photograph", "Plaque close-up",
         "Well-demarcated erythematous plaques with silvery scale over extensor surfaces."),
    ),
    (
        "Dermatology", ["Mycology Clinic"],
        "A ring-shaped itchy rash spreading on the forearm",
        "Expanding ring-shaped itchy rash on the forearm with central clearing",
        "Keeps two cats and volunteers at an animal shelter.",
        "One of the cats had patchy fur loss last month.",
        ["Skin examination", "Pathological examination"],
        "Tinea corporis",
        ["Medication"],
        None,
    ),
    (
        "Otolaryngology", ["Rhinology"],
        "Blocked nose and facial pressure for two months",
        "Blocked nose, thick discharge, and facial pressure worse when bending",
        "Primary-school teacher exposed to every classroom cold.",
        "Several colds this winter; smell is fading.",
        ["Head, eyes, ears, nose and throat examination", "CT"],
        "Chronic rhinosinusitis",
        ["Medication", "Surgery"],
        ("CT image", "Sinus scan",
         "Mucosal thickening of both maxillary sinuses with obstructed ostiomeatal complexes."),
    ),
    (
        "Otolaryngology", ["Otology"],
        "Sudden loss of hearing in the left ear since yesterday",
        "Sudden left-sided hearing loss with ringing and a blocked feeling",
        "Accountant in a quiet office, no noisy hobbies.",
        "No ear infections before; slight dizziness when turning quickly.",
        ["Head, eyes, ears, nose and throat examination", "Neurological examination"],
        "Sudden sensorineural hearing loss of the left ear",
        ["Medication"],
        None,
    ),
    (
        "Otolaryngology", ["Laryngology"],
        "Severe sore throat and fever for three days",
        "Severe sore throat, painful swallowing, fever, and swollen neck glands",
        "Call-center agent who talks all day.",
        "Tonsil trouble twice before in past winters.",
        ["General examination", "Head, eyes, ears, nose and throat examination", "Blood tests"],
        "Acute bacterial tonsillitis",
        ["Antibiotic therapy", "Medication"],
        None,
    ),
    (
        "Obstetrics and Gynecology", ["Gynecology"],
        "Dull left lower belly ache and bloating for one month",
        "Dull left pelvic ache with bloating, unrelated to meals or periods",
        "Yoga instructor, otherwise fit.",
        "Regular cycles; no pregnancies; ache noticed after a charity run.",
        ["General examination", "Urogenital system examination", "Ultrasound"],
        "Left ovarian simple cyst",
        ["Surgery"],
        ("Ultrasound image", "Pelvic scan",
         "A 5 cm simple anechoic cyst arising from the left ovary; no free fluid."),
    ),
    (
        "Obstetrics and Gynecology", ["Obstetrics"],
        "Raised sugar found at the 26-week antenatal check",
        "Pregnant at 26 weeks with raised sugar on routine screening, no symptoms",
        "First pregnancy, works part-time in a bakery.",
        "Pregnancy uneventful so far; grandmother had a sugar illness.",
        ["General examination", "Blood tests", "Urine tests"],
        "Gestational diabetes mellitus",
        ["Medication"],
        None,
    ),
    (
        "Obstetrics and Gynecology", ["Gynecology"],
        "Heavy prolonged periods and pelvic heaviness for months",
        "Heavy periods lasting nine days with clots and a dragging pelvic feeling",
        "Shop owner, two teenage children.",
        "Periods heavier each year; iron tablets prescribed last year.",
        ["General examination", "Urogenital system examination", "Ultrasound", "Blood tests"],
        "Uterine leiomyoma",
        ["Surgery", "Medication"],
        ("Ultrasound image", "Pelvic scan",
         "An intramural uterine mass of 4 cm consistent with a fibroid; endometrium distorted."),
    ),
    (
        "Ophthalmology", ["Cataract Service"],
        "Gradually blurring vision in both eyes over two years",
        "Slowly blurring vision in both eyes with glare while driving at night",
        "Retired bus driver who reads every morning.",
        "Glasses changed twice in two years without lasting benefit.",
        ["Head, eyes, ears, nose and throat examination"],
        "Age-related cataract of both eyes",
        ["Surgery"],
        None,
    ),
    (
        "Ophthalmology", ["Cornea and Ocular Surface"],
        "Red sticky eyes with discharge for three days",
        "Both eyes red and sticky with yellow discharge, lids glued each morning",
        "Nursery assistant surrounded by toddlers.",
        "Several children at work have had sore eyes this month.",
        ["Head, eyes, ears, nose and throat examination"],
        "Acute bacterial conjunctivitis",
        ["Antibiotic therapy"],
        None,
    ),
    (
        "Ophthalmology", ["Retina and Vitreous"],
        "Dark floating spots in my vision for two weeks",
        "Drifting dark spots in both eyes, vision mildly blurred, no pain",
        "Taxi driver with long night shifts.",
        "A long-standing sugar illness managed with tablets for ten years.",
        ["Head, eyes, ears, nose and throat examination", "Blood tests"],
        "Non-proliferative diabetic retinopathy",
        ["Interventional therapy", "Medication"],
        ("Clinical photograph", "Fundus view",
         "Scattered dot hemorrhages and hard exudates in the posterior pole of both eyes."),
    ),
]

VARIANTS = [
    (0, dict(age=58, sex="male"), "No known drug allergies."),
    (1, dict(age=47, sex="female"), "Allergic to pollen in spring."),
]

AGE_OVERRIDES = {
    "Pediatrics": [(0, dict(age=2, sex="female")), (1, dict(age=1, sex="male"))],
    "Obstetrics and Gynecology": [(0, dict(age=31, sex="female")), (1, dict(age=38, sex="female"))],
    "Ophthalmology": [(0, dict(age=67, sex="male")), (1, dict(age=59, sex="female"))],
}


def build_cases() -> list[dict]:
    cases = []
    counter = 0
    for condition in CONDITIONS:
        (l1, l2, complaint, symptom, description, history,
         exams, diagnosis, treatments, image) = condition
        for variant_index, (_, demo, history_extra) in enumerate(VARIANTS):
            counter += 1
            demographics = dict(demo)
            override = AGE_OVERRIDES.get(l1)
            if override:
                demographics = dict(override[variant_index][1])
            case = {
                "id": f"case-{counter:04d}",
                "age": demographics["age"],
                "sex": demographics["sex"],
                "chief_complaint": complaint,
                "patient_description": description,
                "symptom_description": symptom,
                "patient_history": f"{history} {history_extra}",
                "images": [],
                "gold_referral_l1": l1,
                "gold_referral_l2": l2,
                "gold_examinations": exams,
                "gold_imaging_report": "",
                "gold_diagnosis": diagnosis,
                "gold_treatments": treatments,
            }
            if image is not None:
                modality, caption, report = image
                case["images"] = [
                    {
                        "uri": f"images/{case['id']}_1.png",
                        "modality_tag": modality,
                        "caption": caption,
                    }
                ]
                case["gold_imaging_report"] = report
            cases.append(case)
    return cases


def check_blindness(cases: list[dict], treatment_labels: list[str]) -> None:
    """Patient-visible text must not leak outcome strings, or the audit is vacuous."""
    visible_fields = ("chief_complaint", "patient_description", "symptom_description",
                      "patient_history")
    for case in cases:
        visible = " ".join(case[f] for f in visible_fields).casefold()
        for label in treatment_labels:
            if label.casefold() in visible:
                raise SystemExit(f"{case['id']}: treatment label {label!r} leaks into patient text")
        if case["gold_diagnosis"].casefold() in visible:
            raise SystemExit(f"{case['id']}: diagnosis string leaks into patient text")


DIALOGUE_QUESTIONS = [
    "Can you describe when the symptoms began and what makes them better or worse?",
    "Have you noticed fevers, weight changes, or anything else unusual recently?",
]

RUN_SCRIPT_RULES = [
    {"tag": "referral_l1.general",
     "reply": "Routing view: the pattern described points to a medical service rather than an urgent theatre case."},
    {"tag": "referral_l1.summarizer", "reply": "Internal Medicine"},
    {"tag": "referral_l1.feedback", "reply": "APPROVE"},
    {"tag": "referral_l2.general",
     "reply": "Within that service, the complaint profile fits a cardiovascular clinic best."},
    {"tag": "referral_l2.summarizer", "reply": "Cardiology"},
    {"tag": "referral_l2.feedback", "reply": "APPROVE"},
    {"tag": "history.doctor", "replies": DIALOGUE_QUESTIONS + ["[CONSULTATION_COMPLETE]"]},
    {"tag": "history.patient",
     "reply": "It started gradually and gets worse with effort; nothing unusual otherwise."},
    {"tag": "history.extractor", "reply": "X-ray\nBlood tests\nGeneral examination"},
    {"tag": "history.general",
     "reply": "Workup view: baseline observations plus targeted tests should narrow this down."},
    {"tag": "history.summarizer", "reply": "General examination; X-ray; Blood tests"},
    {"tag": "history.feedback", "reply": "APPROVE"},
    {"tag": "examination.general",
     "reply": "Reading view: the study shows the expected focal change without complications."},
    {"tag": "examination.summarizer",
     "reply": "Imaging interpretation IR-77: the study demonstrates findings consistent with the working referral, with no acute complication identified."},
    {"tag": "examination.feedback", "reply": "APPROVE"},
    {"tag": "diagnosis.general",
     "reply": "Assessment view: presentation and workup line up with a single leading candidate."},
    {"tag": "diagnosis.summarizer",
     "reply": "Working impression DX-42: condition consistent with the retrieved precedent cases."},
    {"tag": "diagnosis.feedback", "reply": "APPROVE"},
    {"tag": "treatment.general",
     "reply": "Plan view: conservative management with targeted follow-up should suffice."},
    {"tag": "treatment.summarizer", "reply": "Medication; Physical therapy"},
    {"tag": "treatment.feedback", "reply": "APPROVE"},
]

JUDGE_SCRIPT_RULES = [
    {"tag": "judge.diagnosis", "reply": "3"},
    {"tag": "judge.claim_extract",
     "reply": "1. The study covers the region named in the referral.\n2. No acute complication is identified."},
    {"tag": "judge.claim_entail", "reply": "YES"},
]


def main() -> None:
    vocabs = load_vocabularies()
    cases = build_cases()
    check_blindness(cases, list(vocabs.treatments.labels(ItemCategory.TREATMENT)))
    for case in cases:
        parse_case(case, vocabs)  # fail loudly if any fixture is invalid

    FIXTURES.mkdir(exist_ok=True)
    corpus_path = FIXTURES / "corpus.jsonl"
    corpus_path.write_text(
        "\n".join(json.dumps(c, ensure_ascii=False, sort_keys=True) for c in cases) + "\n",
        encoding="utf-8",
    )
    (FIXTURES / "scripts.json").write_text(
        json.dumps({"rules": RUN_SCRIPT_RULES}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    (FIXTURES / "judge_scripts.json").write_text(
        json.dumps({"rules": JUDGE_SCRIPT_RULES}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    departments = sorted({c["gold_referral_l1"] for c in cases})
    with_images = sum(1 for c in cases if c["images"])
    print(f"wrote {len(cases)} cases ({with_images} with images) "
          f"across {len(departments)} departments -> {corpus_path}")


if __name__ == "__main__":
    main()
